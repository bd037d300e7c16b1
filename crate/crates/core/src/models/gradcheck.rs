use super::network::{Batch, Network, ProbeCache};
use crate::error::Result;
use crate::tensor::Tensor;

/// Parameters probed per trainable layer (all of them if the layer is smaller).
pub const PROBES_PER_LAYER: usize = 200;

/// Step reductions tried when a probe straddles a ReLU kink or a max-pool
/// switch before the probe is skipped.
const KINK_RETRIES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes where every step size tried crossed a non-differentiable point
    /// on both sides.
    pub skipped: usize,
}

struct Probe<'a> {
    net: &'a Network,
    batch: &'a Batch,
    cache: &'a ProbeCache,
    params: Vec<Tensor>,
    offset: usize,
    coord: (usize, usize),
}

impl Probe<'_> {
    /// Objective terms at `p + step * e_i`, or `None` off the smooth piece
    /// of the unperturbed point.
    fn terms(&mut self, step: f64) -> Result<Option<Vec<f64>>> {
        let (t, i) = self.coord;
        let orig = self.params[t].data()[i];
        self.params[t].data_mut()[i] = orig + step;
        let out = self.net.probe_terms(&self.params, self.batch, self.cache, self.offset);
        self.params[t].data_mut()[i] = orig;
        out
    }
}

/// `sum_j sum_k c_k * terms_k[j]`. Combining term by term before summing
/// keeps the large constant part of the loss from swamping the difference.
fn combine(parts: &[(f64, &[f64])]) -> f64 {
    let n = parts[0].1.len();
    (0..n).map(|j| parts.iter().map(|(c, t)| c * t[j]).sum::<f64>()).sum()
}

/// Numerical derivative of the summed loss along one coordinate: a central
/// difference, or the second-order one-sided formula when a kink lies within
/// `step` on one side only. The step shrinks when both sides are blocked.
fn numeric_derivative(probe: &mut Probe, eps: f64) -> Result<Option<f64>> {
    let base = probe.cache.terms.clone();
    let mut step = eps;
    for _ in 0..=KINK_RETRIES {
        let (up, down) = (probe.terms(step)?, probe.terms(-step)?);
        if let (Some(up), Some(down)) = (&up, &down) {
            let c = 1.0 / (2.0 * step);
            return Ok(Some(combine(&[(c, up), (-c, down)])));
        }
        let h = 0.5 * step;
        for (sign, far) in [(1.0, &up), (-1.0, &down)] {
            let Some(far) = far else { continue };
            if let Some(near) = probe.terms(sign * h)? {
                let c = sign / (2.0 * h);
                return Ok(Some(combine(&[(4.0 * c, &near), (-3.0 * c, &base), (-c, far)])));
            }
        }
        step *= 0.1;
    }
    Ok(None)
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-12)` between analytic
/// and numerical gradients over a deterministic subsample of each
/// trainable layer's parameters.
pub fn grad_check(net: &Network, params: &[Tensor], batch: &Batch, eps: f64) -> Result<f64> {
    Ok(grad_check_report(net, params, batch, eps)?.max_rel_error)
}

pub fn grad_check_report(net: &Network, params: &[Tensor], batch: &Batch, eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = net.loss_and_grad(params, batch)?;
    let cache = net.probe_cache(params, batch)?;
    let n = batch.len() as f64;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        skipped: 0,
    };
    let mut probe = Probe {
        net,
        batch,
        cache: &cache,
        params: params.to_vec(),
        offset: 0,
        coord: (0, 0),
    };
    for layer in net.layers() {
        let Some(off) = layer.param_offset else { continue };
        let sizes = [params[off].len(), params[off + 1].len()];
        let total = sizes[0] + sizes[1];
        let count = total.min(PROBES_PER_LAYER);
        for k in 0..count {
            let flat = k * total / count;
            let (t, i) = if flat < sizes[0] { (off, flat) } else { (off + 1, flat - sizes[0]) };
            probe.offset = off;
            probe.coord = (t, i);
            report.probes += 1;
            let Some(numeric) = numeric_derivative(&mut probe, eps)? else {
                report.skipped += 1;
                continue;
            };
            let numeric = numeric / n;
            let a = analytic[t].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}

