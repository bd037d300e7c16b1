//! FLOP accounting, peak/sustained rates and scaling reports.

mod flops;
mod throughput;

pub use flops::{layer_flops, model_flops};
pub use throughput::{
    peak_sustained, scaling_csv, scaling_report, scaling_svg, stream_peak_sustained, throughput, ScalingEntry,
    ScalingRow, BASELINE_MODE,
};
