//! The two networks, their objectives, detection inference and ROC tools.

pub mod climate;
mod gradcheck;
pub mod hep;
mod network;
pub mod roc;

pub use climate::{
    build_climate_mini, climate_loss, infer_boxes, BoxPrediction, BoxTarget, ClimateConfig, ClimateLossWeights,
    DetectionGrads, DetectionOutput,
};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, PROBES_PER_LAYER};
pub use hep::{build_hep_mini, HepConfig};
pub use network::{Batch, Layer, LayerKind, Network, Objective, Shard, Targets};
pub use roc::{baseline_cut_classifier, roc_tpr_at_fpr, CutBaseline};
