//! Command-line front end, experiment configuration, sweeps and reports.

mod cli;
mod config;
mod experiment;
mod report;

pub use cli::{init_threads, run, THREADS_ENV};
pub use config::{apply_override, BatchMode, ClusterConfig, DataConfig, ExperimentConfig, ModelKind};
pub use experiment::{
    batch_per_group, build_model, gen_data, load_or_generate, load_runs, params_sha256, report, sha256_hex,
    sweep_groups, sweep_scaling, train, CellInfo, CellSummary, CommandOutcome, Manifest,
};
pub use report::{
    parse_runlog_csv, runlog_csv, runlog_record, time_to_loss, time_to_loss_csv, time_to_loss_table, RUNLOG_HEADER,
};
