use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use super::config::ExperimentConfig;
use super::experiment::{gen_data, report, sweep_groups, sweep_scaling, train, Manifest};
use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "HYBRIDTRAIN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hybridtrain", version, about = "Hybrid sync/async training on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the configuration recorded in a manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Override a config value, e.g. `--set cluster.groups=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured dataset and save it.
    GenData(ConfigArgs),
    /// Run one configuration and write its run log and final model.
    Train(ConfigArgs),
    /// Strong-scaling sweep over node counts and group counts.
    SweepStrong(ConfigArgs),
    /// Weak-scaling sweep over node counts and group counts.
    SweepWeak(ConfigArgs),
    /// Momentum/learning-rate grid across group counts.
    SweepGroups(ConfigArgs),
    /// Re-analyze run logs under a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Sustained-rate window in iterations.
        #[arg(long)]
        window: usize,
        #[arg(long)]
        target_loss: Option<f64>,
    },
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.manifest) {
        (Some(path), None) => ExperimentConfig::load(path, &args.overrides)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("malformed manifest {}: {e}", path.display())))?;
            let mut value = serde_json::to_value(&manifest.config).map_err(|e| Error::Internal(e.to_string()))?;
            for o in &args.overrides {
                super::config::apply_override(&mut value, o)?;
            }
            ExperimentConfig::from_value(value)?
        }
        _ => return Err(Error::Config("one of --config or --manifest is required".into())),
    };
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Caps host parallelism from `HYBRIDTRAIN_THREADS`; results do not depend on it.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Returns whether any run diverged.
fn dispatch(cli: Cli) -> Result<bool> {
    init_threads()?;
    let outcome = match cli.command {
        Command::GenData(a) => {
            let path = gen_data(&load(&a)?)?;
            println!("wrote {}", path.display());
            return Ok(false);
        }
        Command::Train(a) => train(&load(&a)?)?,
        Command::SweepStrong(a) => sweep_scaling(&load(&a)?, false)?,
        Command::SweepWeak(a) => sweep_scaling(&load(&a)?, true)?,
        Command::SweepGroups(a) => sweep_groups(&load(&a)?)?,
        Command::Report {
            out,
            window,
            target_loss,
        } => {
            let cells = report(&out, window, target_loss)?;
            println!("analyzed {} runs under {}", cells.len(), out.display());
            return Ok(false);
        }
    };
    for c in &outcome.cells {
        let loss = c.run.final_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
        println!(
            "{}: {} updates in {:.3} simulated s, final loss {loss}, mean staleness {:.3}{}",
            c.cell.label,
            c.run.updates,
            c.run.sim_time_s,
            c.run.mean_staleness,
            if c.run.diverged { " (diverged)" } else { "" }
        );
    }
    println!("outputs in {}", outcome.out.display());
    Ok(outcome.diverged)
}

/// Exit codes: 0 success, 1 invalid input or other failure, 2 divergence.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("error: training diverged");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { 2 } else { 1 })
        }
    }
}
