use serde::{Deserialize, Serialize};

use super::network::{LayerKind, Network, NetworkBuilder, Objective};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HepConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
}

impl Default for HepConfig {
    fn default() -> Self {
        HepConfig {
            channels: 3,
            height: 32,
            width: 32,
            filters: 16,
        }
    }
}

/// Five 3x3 conv + ReLU units, max pooling after the first four, global
/// average pooling after the fifth, and a dense layer to two logits.
pub fn build_hep_mini(cfg: &HepConfig) -> Result<Network> {
    let HepConfig {
        channels,
        height,
        width,
        filters,
    } = *cfg;
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::shape(format!(
            "HEP input {height}x{width} must be divisible by 16 for four 2x2 pools"
        )));
    }
    if channels == 0 || filters == 0 {
        return Err(Error::shape("HEP channels and filters must be positive"));
    }
    let mut b = NetworkBuilder::new([channels, height, width]);
    let mut c = channels;
    for unit in 1..=5 {
        b.push(&format!("conv{unit}"), LayerKind::Conv(ConvSpec::square(c, filters, 3, 1, 1)))?;
        b.push(&format!("relu{unit}"), LayerKind::Relu)?;
        let pool = if unit < 5 {
            PoolKind::Max2x2Stride2
        } else {
            PoolKind::GlobalAvg
        };
        b.push(&format!("pool{unit}"), LayerKind::Pool(pool))?;
        c = filters;
    }
    b.push(
        "fc",
        LayerKind::Dense {
            inputs: filters,
            outputs: 2,
        },
    )?;
    Ok(b.finish(Objective::SoftmaxXent { classes: 2 }))
}
