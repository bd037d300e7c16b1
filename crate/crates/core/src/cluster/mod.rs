//! Discrete-event simulation of synchronous, asynchronous and hybrid
//! data-parallel training.

mod plan;
mod runlog;
mod sim;
mod timing;

pub use plan::{inject_degradation, plan_cluster, plan_cluster_with, CheckpointModel, ClusterPlan};
pub use runlog::{DivergenceRecord, IterRecord, RunLog, RunOutcome, RunSummary};
pub use sim::{reference_sync_training, run_timing, run_training, BatchSampler, WIRE_BYTES_PER_PARAM};
pub use timing::{
    allreduce_time, allreduce_time_jittered, broadcast_time, default_efficiency_curve, ComputeModel, NetworkModel,
};
