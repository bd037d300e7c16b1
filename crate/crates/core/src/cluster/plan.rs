use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::timing::{ComputeModel, NetworkModel};
use crate::error::{Error, Result};
use crate::models::Network;

/// Optional fixed cost charged to a group when the global step crosses a
/// multiple of `every`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointModel {
    pub every: u64,
    pub cost_s: f64,
}

impl Default for CheckpointModel {
    fn default() -> Self {
        CheckpointModel { every: 10, cost_s: 0.0 }
    }
}

/// Node layout: workers `0..G*w` (group `g` owns `g*w..(g+1)*w`, its first
/// node is the root), then one PS per trainable layer, then idle remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub total_nodes: usize,
    pub num_groups: usize,
    pub ps_nodes: usize,
    pub workers_per_group: usize,
    pub idle_nodes: usize,
    pub network: NetworkModel,
    pub compute: ComputeModel,
    /// Permanent per-node slowdown factors.
    pub degradation: BTreeMap<usize, f64>,
    /// Start the next iteration while updates are still in flight.
    pub overlap: bool,
    pub checkpoint: CheckpointModel,
}

pub fn plan_cluster(total_nodes: usize, groups: usize, model: &Network) -> Result<ClusterPlan> {
    plan_cluster_with(total_nodes, groups, model.trainable_layer_count())
}

pub fn plan_cluster_with(total_nodes: usize, groups: usize, ps_nodes: usize) -> Result<ClusterPlan> {
    if groups == 0 {
        return Err(Error::Planning("at least one group is required".into()));
    }
    if total_nodes <= groups + ps_nodes {
        return Err(Error::Planning(format!(
            "{total_nodes} nodes cannot host {groups} groups plus {ps_nodes} parameter servers"
        )));
    }
    let workers_per_group = (total_nodes - ps_nodes) / groups;
    Ok(ClusterPlan {
        total_nodes,
        num_groups: groups,
        ps_nodes,
        workers_per_group,
        idle_nodes: total_nodes - ps_nodes - groups * workers_per_group,
        network: NetworkModel::default(),
        compute: ComputeModel::default(),
        degradation: BTreeMap::new(),
        overlap: false,
        checkpoint: CheckpointModel::default(),
    })
}

impl ClusterPlan {
    /// Plan with an explicit worker layout and no idle nodes; sweeps count
    /// compute nodes and add the parameter servers on top.
    pub fn from_workers(groups: usize, workers_per_group: usize, ps_nodes: usize) -> Result<ClusterPlan> {
        if groups == 0 || workers_per_group == 0 {
            return Err(Error::Planning(format!(
                "need at least one worker in at least one group, got {groups} x {workers_per_group}"
            )));
        }
        let mut plan = plan_cluster_with(groups * workers_per_group + ps_nodes + groups, groups, ps_nodes)?;
        plan.total_nodes = groups * workers_per_group + ps_nodes;
        plan.workers_per_group = workers_per_group;
        plan.idle_nodes = 0;
        Ok(plan)
    }

    pub fn worker_count(&self) -> usize {
        self.num_groups * self.workers_per_group
    }

    pub fn group_nodes(&self, group: usize) -> Range<usize> {
        group * self.workers_per_group..(group + 1) * self.workers_per_group
    }

    pub fn root(&self, group: usize) -> usize {
        group * self.workers_per_group
    }

    pub fn ps_node(&self, layer: usize) -> usize {
        self.worker_count() + layer
    }

    pub fn is_sync(&self) -> bool {
        self.num_groups == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 || self.workers_per_group == 0 {
            return Err(Error::Planning("plan has no workers".into()));
        }
        if self.worker_count() + self.ps_nodes > self.total_nodes {
            return Err(Error::Planning(format!(
                "{} workers plus {} PS exceed {} nodes",
                self.worker_count(),
                self.ps_nodes,
                self.total_nodes
            )));
        }
        if let Some((&n, _)) = self.degradation.iter().find(|(&n, &s)| n >= self.worker_count() || !(s >= 1.0)) {
            return Err(Error::validation(format!("invalid degradation entry for node {n}")));
        }
        self.network.validate()?;
        self.compute.validate()
    }
}

/// Slows worker `node_id` by `slowdown` for the whole run.
pub fn inject_degradation(mut plan: ClusterPlan, node_id: usize, slowdown: f64) -> Result<ClusterPlan> {
    if node_id >= plan.worker_count() {
        return Err(Error::validation(format!(
            "node {node_id} is not a worker (workers are 0..{})",
            plan.worker_count()
        )));
    }
    if !(slowdown >= 1.0 && slowdown.is_finite()) {
        return Err(Error::validation(format!("slowdown must be >= 1, got {slowdown}")));
    }
    *plan.degradation.entry(node_id).or_insert(1.0) *= slowdown;
    Ok(plan)
}
