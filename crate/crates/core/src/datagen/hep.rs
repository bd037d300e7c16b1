use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{q, rng::stream, Split};
use crate::error::{Error, Result};
use crate::models::Batch;
use crate::models::Targets;
use crate::tensor::Tensor;

const EM: usize = 0;
const HAD: usize = 1;
const TRACKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HepGenConfig {
    pub height: usize,
    pub width: usize,
    /// Mean number of background clusters (Poisson).
    pub clusters_mean: f64,
    /// Hard cap on background clusters, which bounds image occupancy.
    pub clusters_max: usize,
    /// Gamma shape and scale of a background cluster's energy.
    pub energy_shape: f64,
    pub energy_scale: f64,
    /// Motif clusters sit within this many pixels of the motif center.
    pub motif_radius: f64,
    /// Signal events above this background total-energy quantile are
    /// regenerated, which removes the easy high-energy tail.
    pub energy_filter_quantile: f64,
}

impl Default for HepGenConfig {
    fn default() -> Self {
        HepGenConfig {
            height: 32,
            width: 32,
            clusters_mean: 4.0,
            clusters_max: 16,
            energy_shape: 3.0,
            energy_scale: 2.0 / 3.0,
            motif_radius: 1.5,
            energy_filter_quantile: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HepSample {
    /// `[3, H, W]`: EM energy, hadronic energy, track count.
    pub image: Tensor,
    pub signal: bool,
    /// Total energy, hit count, max-cluster energy (largest 3x3 window sum).
    pub features: [f64; 3],
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HepDataset {
    pub samples: Vec<HepSample>,
}

const REFERENCE_BACKGROUNDS: usize = 4000;
const MAX_SIGNAL_ATTEMPTS: u64 = 64;

struct Cluster {
    row: f64,
    col: f64,
    energy: f64,
    em_fraction: f64,
    tracks: u32,
}

fn draw_background(cfg: &HepGenConfig, rng: &mut impl Rng) -> Vec<Cluster> {
    let poisson = Poisson::new(cfg.clusters_mean).expect("positive mean");
    let gamma = Gamma::new(cfg.energy_shape, cfg.energy_scale).expect("positive gamma");
    let tracks = Poisson::new(1.0).expect("positive mean");
    let k = (poisson.sample(rng) as usize).min(cfg.clusters_max);
    (0..k)
        .map(|_| Cluster {
            row: rng.random_range(1.0..cfg.height as f64 - 1.0),
            col: rng.random_range(1.0..cfg.width as f64 - 1.0),
            energy: gamma.sample(rng),
            em_fraction: rng.random_range(0.2..0.8),
            tracks: tracks.sample(rng) as u32,
        })
        .collect()
}

/// Three EM-rich clusters packed around one point, each carrying about twice
/// the mean background cluster energy.
fn draw_motif(cfg: &HepGenConfig, rng: &mut impl Rng) -> Vec<Cluster> {
    let r = cfg.motif_radius;
    let row0 = rng.random_range(r + 1.0..cfg.height as f64 - r - 1.0);
    let col0 = rng.random_range(r + 1.0..cfg.width as f64 - r - 1.0);
    let mean_energy = cfg.energy_shape * cfg.energy_scale;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..3)
        .map(|j| {
            let angle = phase + j as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.3..0.3);
            let dist = rng.random_range(0.5 * r..r);
            Cluster {
                row: row0 + dist * angle.sin(),
                col: col0 + dist * angle.cos(),
                energy: 2.0 * mean_energy * rng.random_range(0.8..1.2),
                em_fraction: rng.random_range(0.85..1.0),
                tracks: 1,
            }
        })
        .collect()
}

/// Deposits clusters over a 3x3 Gaussian footprint around their nearest pixel.
fn render(cfg: &HepGenConfig, clusters: &[Cluster], signal: bool, split: Split) -> HepSample {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0.0; 3 * h * w];
    for c in clusters {
        let (pr, pc) = (c.row.round() as isize, c.col.round() as isize);
        let mut weights = [[0.0; 3]; 3];
        let mut total = 0.0;
        for (dy, row) in weights.iter_mut().enumerate() {
            for (dx, wgt) in row.iter_mut().enumerate() {
                let y = (pr + dy as isize - 1) as f64;
                let x = (pc + dx as isize - 1) as f64;
                let d2 = (y - c.row).powi(2) + (x - c.col).powi(2);
                *wgt = (-d2 / (2.0 * 0.7 * 0.7)).exp();
                total += *wgt;
            }
        }
        for (dy, row) in weights.iter().enumerate() {
            for (dx, wgt) in row.iter().enumerate() {
                let y = pr + dy as isize - 1;
                let x = pc + dx as isize - 1;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let idx = y as usize * w + x as usize;
                let e = c.energy * wgt / total;
                data[EM * h * w + idx] += e * c.em_fraction;
                data[HAD * h * w + idx] += e * (1.0 - c.em_fraction);
            }
        }
        if pr >= 0 && pc >= 0 && (pr as usize) < h && (pc as usize) < w {
            data[TRACKS * h * w + pr as usize * w + pc as usize] += c.tracks as f64;
        }
    }
    data.iter_mut().for_each(|v| *v = q(*v));
    let total_energy: f64 = data[..2 * h * w].iter().sum();
    let hits = (0..h * w)
        .filter(|&i| data[EM * h * w + i] + data[HAD * h * w + i] > 0.0)
        .count();
    let max_cluster = max_window_energy(&data, h, w);
    HepSample {
        image: Tensor::from_vec(&[3, h, w], data).expect("consistent extents"),
        signal,
        features: [q(total_energy), hits as f64, q(max_cluster)],
        split,
    }
}

/// Reconstructed max-cluster energy: the largest calorimeter energy
/// (EM plus hadronic) in any 3x3 window.
fn max_window_energy(data: &[f64], h: usize, w: usize) -> f64 {
    let mut best: f64 = 0.0;
    for r in 0..h.saturating_sub(2) {
        for c in 0..w.saturating_sub(2) {
            let mut e = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let i = (r + dy) * w + c + dx;
                    e += data[EM * h * w + i] + data[HAD * h * w + i];
                }
            }
            best = best.max(e);
        }
    }
    best
}

fn total_energy(clusters: &[Cluster]) -> f64 {
    clusters.iter().map(|c| c.energy).sum()
}

/// Background total-energy quantile from a fixed reference draw, so the
/// filter does not depend on the requested dataset size.
fn energy_threshold(cfg: &HepGenConfig, seed: u64) -> f64 {
    let mut totals: Vec<f64> = (0..REFERENCE_BACKGROUNDS)
        .map(|j| total_energy(&draw_background(cfg, &mut stream(seed, &[0x0052_4546, j as u64]))))
        .collect();
    totals.sort_by(f64::total_cmp);
    let idx = ((cfg.energy_filter_quantile * (totals.len() - 1) as f64).round() as usize).min(totals.len() - 1);
    totals[idx]
}

pub fn gen_hep(seed: u64, n: usize, signal_fraction: f64) -> Result<HepDataset> {
    gen_hep_with(&HepGenConfig::default(), seed, n, signal_fraction)
}

/// Background events are `Poisson(clusters_mean)` calorimeter clusters;
/// signal events add a compact EM-rich three-cluster motif. Sample `i` is a
/// pure function of `(seed, i)`.
pub fn gen_hep_with(cfg: &HepGenConfig, seed: u64, n: usize, signal_fraction: f64) -> Result<HepDataset> {
    if n == 0 {
        return Err(Error::validation("dataset size must be positive"));
    }
    if !(signal_fraction > 0.0 && signal_fraction < 1.0) {
        return Err(Error::validation(format!(
            "signal_fraction must lie in (0, 1), got {signal_fraction}"
        )));
    }
    if cfg.height < 8 || cfg.width < 8 || cfg.clusters_mean <= 0.0 {
        return Err(Error::validation(format!("invalid HEP generator settings: {cfg:?}")));
    }
    let threshold = energy_threshold(cfg, seed);
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let signal = stream(seed, &[0x004c_4142, i as u64]).random_bool(signal_fraction);
            let split = Split::of(seed, i);
            let mut attempt = 0;
            loop {
                let mut rng = stream(seed, &[0x0045_5654, i as u64, attempt]);
                let mut clusters = draw_background(cfg, &mut rng);
                if !signal {
                    return render(cfg, &clusters, false, split);
                }
                clusters.extend(draw_motif(cfg, &mut rng));
                attempt += 1;
                if total_energy(&clusters) <= threshold || attempt >= MAX_SIGNAL_ATTEMPTS {
                    return render(cfg, &clusters, true, split);
                }
            }
        })
        .collect();
    Ok(HepDataset { samples })
}

impl HepDataset {
    pub fn labels(&self, indices: &[usize]) -> Vec<bool> {
        indices.iter().map(|&i| self.samples[i].signal).collect()
    }

    pub fn features(&self, indices: &[usize]) -> Vec<[f64; 3]> {
        indices.iter().map(|&i| self.samples[i].features).collect()
    }

    /// Stacks the given samples into a network batch (label 1 = signal).
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Ok(Batch {
            input: Tensor::stack(&images)?,
            targets: Targets::Labels(indices.iter().map(|&i| usize::from(self.samples[i].signal)).collect()),
        })
    }
}
