use std::f64::consts::{PI, TAU};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{q, rng::stream, Split};
use crate::error::{Error, Result};
use crate::models::{Batch, BoxTarget, Targets};
use crate::tensor::Tensor;

/// Channel carrying the cyclone's positive vorticity bump.
pub const VORTEX_CHANNEL: usize = 2;
const WIND_U: usize = 0;
const WIND_V: usize = 1;
const PRESSURE: usize = 3;
const MOISTURE: usize = 4;
const PRECIP_WATER: usize = 5;

pub const CYCLONE: usize = 0;
pub const RIVER: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClimateGenConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Detection grid; no two boxes of one sample share a cell.
    pub grid: usize,
    pub max_events: usize,
    /// Probability that an injected event is a cyclone rather than a river.
    pub cyclone_fraction: f64,
    /// Amplitude of each background sinusoid is drawn from `[0, background_amplitude)`.
    pub background_amplitude: f64,
    pub vortex_strength: f64,
    pub river_strength: f64,
}

impl Default for ClimateGenConfig {
    fn default() -> Self {
        ClimateGenConfig {
            channels: 8,
            height: 64,
            width: 64,
            grid: 8,
            max_events: 3,
            cyclone_fraction: 0.6,
            background_amplitude: 0.3,
            vortex_strength: 3.0,
            river_strength: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimateSample {
    pub image: Tensor,
    pub boxes: Vec<BoxTarget>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimateDataset {
    pub samples: Vec<ClimateSample>,
}

pub fn gen_climate(seed: u64, n: usize) -> Result<ClimateDataset> {
    gen_climate_with(&ClimateGenConfig::default(), seed, n)
}

struct Field<'a> {
    data: &'a mut [f64],
    h: usize,
    w: usize,
}

impl Field<'_> {
    /// Adds `f(x, y)` evaluated at pixel centers (pixel units, y down).
    fn add(&mut self, channel: usize, f: impl Fn(f64, f64) -> f64) {
        let base = channel * self.h * self.w;
        for r in 0..self.h {
            for c in 0..self.w {
                self.data[base + r * self.w + c] += f(c as f64 + 0.5, r as f64 + 0.5);
            }
        }
    }
}

/// Box in fractional y-up coordinates from a pixel-space extent (y down).
fn to_box(class: usize, x0: f64, y0: f64, x1: f64, y1: f64, w: usize, h: usize) -> BoxTarget {
    BoxTarget {
        class,
        x: q(x0 / w as f64),
        y: q(1.0 - y1 / h as f64),
        w: q((x1 - x0) / w as f64),
        h: q((y1 - y0) / h as f64),
    }
}

fn cyclone(cfg: &ClimateGenConfig, field: &mut Field, rng: &mut impl Rng) -> (f64, f64, BoxTarget) {
    let radius = rng.random_range(3.0..6.0);
    let half = 1.5 * radius;
    let cx = rng.random_range(half..field.w as f64 - half);
    let cy = rng.random_range(half..field.h as f64 - half);
    let spin = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let a = cfg.vortex_strength;
    let envelope = move |x: f64, y: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * radius * radius)).exp();
    field.add(WIND_U, |x, y| -spin * a * 0.5 * (y - cy) / radius * envelope(x, y));
    field.add(WIND_V, |x, y| spin * a * 0.5 * (x - cx) / radius * envelope(x, y));
    let core = 0.5 * radius;
    field.add(VORTEX_CHANNEL, |x, y| {
        a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * core * core)).exp()
    });
    field.add(PRESSURE, |x, y| -a * 0.5 * envelope(x, y));
    let b = to_box(CYCLONE, cx - half, cy - half, cx + half, cy + half, field.w, field.h);
    (cx, cy, b)
}

fn river(cfg: &ClimateGenConfig, field: &mut Field, rng: &mut impl Rng) -> (f64, f64, BoxTarget) {
    let len = rng.random_range(24.0..40.0);
    let sigma = 1.5;
    let angle = rng.random_range(PI / 6.0..PI / 3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let (dx, dy) = (0.5 * len * angle.cos(), 0.5 * len * angle.sin());
    let margin = 2.0 * sigma;
    let (hx, hy) = (dx.abs() + margin, dy.abs() + margin);
    let cx = rng.random_range(hx..field.w as f64 - hx);
    let cy = rng.random_range(hy..field.h as f64 - hy);
    let (ux, uy) = (angle.cos(), angle.sin());
    let s = cfg.river_strength;
    let filament = move |x: f64, y: f64| {
        let (px, py) = (x - cx, y - cy);
        let along = (px * ux + py * uy).clamp(-0.5 * len, 0.5 * len);
        let d2 = (px - along * ux).powi(2) + (py - along * uy).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    field.add(MOISTURE, |x, y| s * filament(x, y));
    field.add(PRECIP_WATER, |x, y| 0.75 * s * filament(x, y));
    let b = to_box(RIVER, cx - hx, cy - hy, cx + hx, cy + hy, field.w, field.h);
    (cx, cy, b)
}

/// Smooth backgrounds (three low-frequency plane waves per channel) with 0 to
/// `max_events` injected cyclones or atmospheric rivers, each recorded as a box.
pub fn gen_climate_with(cfg: &ClimateGenConfig, seed: u64, n: usize) -> Result<ClimateDataset> {
    if n == 0 {
        return Err(Error::validation("dataset size must be positive"));
    }
    if cfg.channels <= PRECIP_WATER || cfg.height < 32 || cfg.width < 32 || cfg.grid == 0 {
        return Err(Error::validation(format!(
            "climate generator needs at least {} channels and 32x32 pixels, got {cfg:?}",
            PRECIP_WATER + 1
        )));
    }
    if cfg.max_events > cfg.grid * cfg.grid || !(0.0..=1.0).contains(&cfg.cyclone_fraction) {
        return Err(Error::validation(format!("invalid climate generator settings: {cfg:?}")));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[0x434c_494d, i as u64]);
            let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
            let mut data = vec![0.0; c * h * w];
            let mut field = Field { data: &mut data, h, w };
            for ch in 0..c {
                for _ in 0..3 {
                    let amp = rng.random_range(0.0..cfg.background_amplitude);
                    let freq = rng.random_range(1.0..3.0);
                    let dir = rng.random_range(0.0..TAU);
                    let phase = rng.random_range(0.0..TAU);
                    let (kx, ky) = (TAU * freq * dir.cos() / w as f64, TAU * freq * dir.sin() / h as f64);
                    field.add(ch, |x, y| amp * (kx * x + ky * y + phase).sin());
                }
            }
            let events = rng.random_range(0..=cfg.max_events);
            let mut boxes: Vec<BoxTarget> = Vec::with_capacity(events);
            for _ in 0..events {
                // Redraw placements until the box center lands in a free cell.
                for _ in 0..100 {
                    let mut scratch = vec![0.0; c * h * w];
                    let mut trial = Field { data: &mut scratch, h, w };
                    let (_, _, b) = if rng.random_bool(cfg.cyclone_fraction) {
                        cyclone(cfg, &mut trial, &mut rng)
                    } else {
                        river(cfg, &mut trial, &mut rng)
                    };
                    if boxes.iter().all(|o| o.cell(cfg.grid) != b.cell(cfg.grid)) {
                        field.data.iter_mut().zip(&scratch).for_each(|(d, s)| *d += s);
                        boxes.push(b);
                        break;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v = q(*v));
            ClimateSample {
                image: Tensor::from_vec(&[c, h, w], data).expect("consistent extents"),
                boxes,
                split: Split::of(seed, i),
            }
        })
        .collect();
    Ok(ClimateDataset { samples })
}

impl ClimateDataset {
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Ok(Batch {
            input: Tensor::stack(&images)?,
            targets: Targets::Boxes(indices.iter().map(|&i| self.samples[i].boxes.clone()).collect()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(gen_climate(1, 3).unwrap(), gen_climate(1, 3).unwrap());
        assert_ne!(gen_climate(1, 3).unwrap(), gen_climate(2, 3).unwrap());
    }

    #[test]
    fn boxes_inside_image_and_in_distinct_cells() {
        let d = gen_climate(4, 60).unwrap();
        let mut total = 0;
        for s in &d.samples {
            assert!(s.boxes.len() <= 3);
            total += s.boxes.len();
            for (k, b) in s.boxes.iter().enumerate() {
                assert!(b.is_valid(), "{b:?}");
                assert!(s.boxes[..k].iter().all(|o| o.cell(8) != b.cell(8)));
            }
        }
        assert!(total > 0);
    }
}
