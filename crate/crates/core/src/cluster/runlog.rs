use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One completed update as seen by the group that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    /// Group-local iteration index.
    pub iter: u64,
    pub group: usize,
    pub start: f64,
    pub end: f64,
    /// Mean minibatch loss at the model the group read; absent in timing-only runs.
    pub loss: Option<f64>,
    /// Position of this update in PS application order, starting at 1.
    pub global_step: u64,
    /// Largest per-layer count of foreign updates applied between read and apply.
    pub staleness: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub group: usize,
    pub iter: u64,
    pub global_step: u64,
    pub time: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    /// Sorted by global step.
    pub records: Vec<IterRecord>,
    pub divergence: Option<DivergenceRecord>,
    pub samples_per_update: usize,
    pub num_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub updates: usize,
    pub sim_time_s: f64,
    pub updates_per_s: f64,
    pub samples_per_s: f64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub final_loss: Option<f64>,
    pub total_flops: u64,
    pub diverged: bool,
}

impl RunLog {
    /// First start to last end.
    pub fn makespan(&self) -> f64 {
        let start = self.records.iter().map(|r| r.start).fold(f64::INFINITY, f64::min);
        let end = self.records.iter().map(|r| r.end).fold(f64::NEG_INFINITY, f64::max);
        if self.records.is_empty() {
            0.0
        } else {
            end - start
        }
    }

    /// Updates completed while every group was still producing, and that span.
    ///
    /// The cut is the earliest time any group finished its final update, so a
    /// slow group draining its last iteration does not dilute the rate.
    pub fn steady_window(&self) -> (usize, f64) {
        let mut last_end: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for r in &self.records {
            let e = last_end.entry(r.group).or_insert(f64::NEG_INFINITY);
            *e = e.max(r.end);
        }
        let cut = last_end.values().cloned().fold(f64::INFINITY, f64::min);
        let start = self.records.iter().map(|r| r.start).fold(f64::INFINITY, f64::min);
        if self.records.is_empty() {
            return (0, 0.0);
        }
        (self.records.iter().filter(|r| r.end <= cut).count(), cut - start)
    }

    /// Steady-state updates per simulated second (see [`RunLog::steady_window`]).
    pub fn update_rate(&self) -> f64 {
        let (n, span) = self.steady_window();
        if span > 0.0 {
            n as f64 / span
        } else {
            0.0
        }
    }

    pub fn group_records(&self, group: usize) -> Vec<&IterRecord> {
        let mut v: Vec<&IterRecord> = self.records.iter().filter(|r| r.group == group).collect();
        v.sort_by_key(|r| r.iter);
        v
    }

    pub fn summary(&self) -> RunSummary {
        let n = self.records.len();
        let span = self.makespan();
        let rate = self.update_rate();
        RunSummary {
            updates: n,
            sim_time_s: span,
            updates_per_s: rate,
            samples_per_s: rate * self.samples_per_update as f64,
            mean_staleness: if n == 0 {
                0.0
            } else {
                self.records.iter().map(|r| r.staleness as f64).sum::<f64>() / n as f64
            },
            max_staleness: self.records.iter().map(|r| r.staleness).max().unwrap_or(0),
            final_loss: self.records.last().and_then(|r| r.loss),
            total_flops: self.records.iter().map(|r| r.flops).sum(),
            diverged: self.divergence.is_some(),
        }
    }

    pub fn losses(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// A finished run: its log and the authoritative model at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub log: RunLog,
    pub params: Vec<Tensor>,
}
