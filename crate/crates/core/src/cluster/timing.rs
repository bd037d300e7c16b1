use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interconnect cost model shared by intra-group collectives and PS links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkModel {
    pub latency_s: f64,
    pub bandwidth_bytes_per_s: f64,
    /// Lognormal sigma; each message or collective step is scaled by `exp(sigma * z)`.
    pub jitter_sigma: f64,
    /// Offset into the run seed for the jitter stream.
    pub stream: u64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            latency_s: 50e-6,
            bandwidth_bytes_per_s: 8e9,
            jitter_sigma: 0.1,
            stream: 0,
        }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::validation(format!("network.latency_s must be >= 0, got {}", self.latency_s)));
        }
        if !(self.bandwidth_bytes_per_s > 0.0 && self.bandwidth_bytes_per_s.is_finite()) {
            return Err(Error::validation(format!(
                "network.bandwidth_bytes_per_s must be > 0, got {}",
                self.bandwidth_bytes_per_s
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::validation(format!(
                "network.jitter_sigma must be >= 0, got {}",
                self.jitter_sigma
            )));
        }
        Ok(())
    }

    pub(crate) fn jitter(&self, rng: &mut impl Rng) -> f64 {
        if self.jitter_sigma == 0.0 {
            return 1.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        (self.jitter_sigma * z).exp()
    }

    /// One point-to-point message.
    pub(crate) fn message_time(&self, bytes: usize, rng: &mut impl Rng) -> f64 {
        (self.latency_s + bytes as f64 / self.bandwidth_bytes_per_s) * self.jitter(rng)
    }
}

/// Ring all-reduce without jitter:
/// `2(p-1)/p * bytes/bandwidth + 2(p-1) * latency`.
pub fn allreduce_time(message_bytes: usize, group_size: usize, net: &NetworkModel) -> f64 {
    if group_size <= 1 {
        return 0.0;
    }
    let p = group_size as f64;
    2.0 * (p - 1.0) / p * message_bytes as f64 / net.bandwidth_bytes_per_s + 2.0 * (p - 1.0) * net.latency_s
}

/// Ring all-reduce as `2(p-1)` steps, each scaled by its own jitter draw.
pub fn allreduce_time_jittered(message_bytes: usize, group_size: usize, net: &NetworkModel, rng: &mut impl Rng) -> f64 {
    if group_size <= 1 {
        return 0.0;
    }
    if net.jitter_sigma == 0.0 {
        return allreduce_time(message_bytes, group_size, net);
    }
    let p = group_size as f64;
    let step = message_bytes as f64 / (p * net.bandwidth_bytes_per_s) + net.latency_s;
    (0..2 * (group_size - 1)).map(|_| step * net.jitter(rng)).sum()
}

/// Binomial-tree broadcast: `ceil(log2 p) * (latency + bytes/bandwidth)`.
pub fn broadcast_time(message_bytes: usize, group_size: usize, net: &NetworkModel, rng: &mut impl Rng) -> f64 {
    if group_size <= 1 {
        return 0.0;
    }
    let rounds = usize::BITS - (group_size - 1).leading_zeros();
    (0..rounds).map(|_| net.message_time(message_bytes, rng)).sum()
}

/// Per-node compute cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeModel {
    /// Seconds per sample at full efficiency.
    pub seconds_per_sample: f64,
    /// Relative throughput by per-node minibatch; sizes between entries use
    /// the largest entry not above them.
    pub efficiency: BTreeMap<usize, f64>,
    /// Fraction of iteration time spent outside FLOP-producing kernels.
    pub overhead_fraction: f64,
    pub straggler_probability: f64,
    pub straggler_slowdown: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel::hep()
    }
}

pub fn default_efficiency_curve() -> BTreeMap<usize, f64> {
    [(1, 0.25), (2, 0.4), (4, 0.6), (8, 0.8), (16, 0.92), (32, 1.0)].into_iter().collect()
}

impl ComputeModel {
    /// HEP-mini profile.
    pub fn hep() -> Self {
        ComputeModel {
            seconds_per_sample: 0.010,
            efficiency: default_efficiency_curve(),
            overhead_fraction: 0.125,
            straggler_probability: 1e-5,
            straggler_slowdown: 2.0,
        }
    }

    /// Climate-mini profile: 30x the HEP per-sample cost, 2% overhead, which
    /// keeps a whole iteration over 25x the HEP one despite the smaller overhead.
    pub fn climate() -> Self {
        ComputeModel {
            seconds_per_sample: 0.30,
            overhead_fraction: 0.02,
            ..ComputeModel::hep()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seconds_per_sample > 0.0 && self.seconds_per_sample.is_finite()) {
            return Err(Error::validation("compute.seconds_per_sample must be > 0"));
        }
        if self.efficiency.is_empty() || !self.efficiency.contains_key(&1) {
            return Err(Error::validation("compute.efficiency must include minibatch 1"));
        }
        let mut prev = 0.0;
        for (&b, &m) in &self.efficiency {
            if !(m > 0.0 && m <= 1.0) || m < prev || b == 0 {
                return Err(Error::validation(format!(
                    "compute.efficiency must be in (0, 1] and non-decreasing, got {b}: {m}"
                )));
            }
            prev = m;
        }
        if !(0.0..1.0).contains(&self.overhead_fraction) {
            return Err(Error::validation("compute.overhead_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.straggler_probability) || !(self.straggler_slowdown >= 1.0) {
            return Err(Error::validation(
                "compute.straggler_probability must lie in [0, 1] and straggler_slowdown be >= 1",
            ));
        }
        Ok(())
    }

    pub fn multiplier(&self, per_node_batch: usize) -> f64 {
        self.efficiency
            .range(..=per_node_batch.max(1))
            .next_back()
            .map_or(1.0, |(_, &m)| m)
    }

    /// Undisturbed time for one node to process `samples`.
    pub fn node_time(&self, samples: usize) -> f64 {
        if samples == 0 {
            return 0.0;
        }
        samples as f64 * self.seconds_per_sample / self.multiplier(samples) / (1.0 - self.overhead_fraction)
    }
}
