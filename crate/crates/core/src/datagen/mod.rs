//! Deterministic synthetic datasets and their on-disk container.

mod climate;
mod container;
mod hep;
mod rng;

pub use climate::{gen_climate, gen_climate_with, ClimateDataset, ClimateGenConfig, ClimateSample, VORTEX_CHANNEL};
pub use container::{load_dataset, read_container, save_dataset, write_container, Record, FORMAT_VERSION, MAGIC};
pub use hep::{gen_hep, gen_hep_with, HepDataset, HepGenConfig, HepSample};
pub use rng::{stream, stream_key};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 assignment from a per-sample hash of `(seed, index)`.
    pub fn of(seed: u64, index: usize) -> Split {
        match stream_key(seed, &[0x0053_504c_4954, index as u64]) % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Split> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Hep(HepDataset),
    Climate(ClimateDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Hep(d) => d.samples.len(),
            Dataset::Climate(d) => d.samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of the samples in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        let splits: Vec<Split> = match self {
            Dataset::Hep(d) => d.samples.iter().map(|s| s.split).collect(),
            Dataset::Climate(d) => d.samples.iter().map(|s| s.split).collect(),
        };
        splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Rounds through `f32` so generated data survives the 32-bit container.
pub(crate) fn q(v: f64) -> f64 {
    v as f32 as f64
}
