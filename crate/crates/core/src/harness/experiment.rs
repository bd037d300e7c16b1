use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BatchMode, ExperimentConfig, ModelKind};
use super::report::{parse_runlog_csv, runlog_csv, runlog_record, time_to_loss, time_to_loss_csv, time_to_loss_table};
use crate::cluster::{plan_cluster, run_timing, run_training, ClusterPlan, RunLog, RunOutcome, RunSummary};
use crate::datagen::{gen_climate, gen_hep, load_dataset, save_dataset, write_container, Dataset, Record};
use crate::error::{Error, Result};
use crate::models::{build_climate_mini, build_hep_mini, Network};
use crate::perf::{peak_sustained, scaling_csv, scaling_report, scaling_svg, ScalingEntry, BASELINE_MODE};
use crate::solvers::{SolverConfig, SolverKind};
use crate::tensor::Tensor;

/// Identity of one run inside an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub label: String,
    pub mode: String,
    /// Compute nodes (parameter servers excluded).
    pub nodes: usize,
    pub groups: usize,
    pub samples_per_update: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: CellInfo,
    pub run: RunSummary,
    pub peak_flops_per_s: Option<f64>,
    pub sustained_flops_per_s: Option<f64>,
    pub time_to_target_s: Option<f64>,
    pub runlog_sha256: String,
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub inputs_sha256: String,
}

/// What a command produced; `diverged` selects the divergence exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    pub out: PathBuf,
    pub cells: Vec<CellSummary>,
    pub diverged: bool,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

pub fn params_sha256(params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for t in params {
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Builds the configured network and draws its initial parameters.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Network> {
    let mut net = match cfg.model {
        ModelKind::HepMini => build_hep_mini(&cfg.hep)?,
        ModelKind::ClimateMini => build_climate_mini(&cfg.climate)?,
    };
    net.init_params(cfg.seed);
    Ok(net)
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.data.path {
        let ds = load_dataset(path)?;
        let ok = matches!(
            (&ds, cfg.model),
            (Dataset::Hep(_), ModelKind::HepMini) | (Dataset::Climate(_), ModelKind::ClimateMini)
        );
        if !ok {
            return Err(Error::Config(format!(
                "data.path: {} does not hold data for {:?}",
                path.display(),
                cfg.model
            )));
        }
        return Ok(ds);
    }
    Ok(match cfg.model {
        ModelKind::HepMini => Dataset::Hep(gen_hep(cfg.data.seed, cfg.data.n, cfg.data.signal_fraction)?),
        ModelKind::ClimateMini => Dataset::Climate(gen_climate(cfg.data.seed, cfg.data.n)?),
    })
}

fn inputs_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg.to_json().as_bytes());
    if let Some(path) = &cfg.data.path {
        h.update(fs::read(path)?);
    }
    Ok(hex(&h.finalize()))
}

fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs_sha256: inputs_hash(cfg)?,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

fn configure(cfg: &ExperimentConfig, mut plan: ClusterPlan) -> ClusterPlan {
    plan.network = cfg.network.clone();
    plan.compute = cfg.compute_model();
    plan.overlap = cfg.cluster.overlap;
    plan.checkpoint = cfg.cluster.checkpoint.clone();
    plan
}

/// Strong mode: every group processes the whole batch per update (a single
/// synchronous group splits it across its workers). Weak mode: the group's
/// batch is `batch_per_node` times its worker count.
pub fn batch_per_group(cfg: &ExperimentConfig, plan: &ClusterPlan) -> usize {
    match cfg.cluster.batch {
        BatchMode::Strong { total_batch } => total_batch,
        BatchMode::Weak { batch_per_node } => batch_per_node * plan.workers_per_group,
    }
}

fn mode_label(groups: usize) -> String {
    if groups == 1 {
        BASELINE_MODE.to_string()
    } else {
        format!("hybrid-{groups}")
    }
}

struct Cell {
    info: CellInfo,
    plan: ClusterPlan,
}

fn run_cell(cfg: &ExperimentConfig, net: &Network, data: Option<&Dataset>, cell: &Cell) -> Result<RunOutcome> {
    let bpg = cell.info.samples_per_update;
    match data {
        Some(d) => run_training(&cell.plan, net, d, &cell.info.solver, bpg, cfg.iterations, cell.info.seed),
        None => Ok(RunOutcome {
            log: run_timing(&cell.plan, net, bpg, cfg.iterations, cell.info.seed)?,
            params: net.params.clone(),
        }),
    }
}

fn summarize(cfg: &ExperimentConfig, info: CellInfo, log: &RunLog, params: &[Tensor]) -> CellSummary {
    let ps = peak_sustained(log, cfg.window).ok();
    CellSummary {
        run: log.summary(),
        peak_flops_per_s: ps.map(|p| p.0),
        sustained_flops_per_s: ps.map(|p| p.1),
        time_to_target_s: cfg.target_loss.and_then(|t| time_to_loss(log, t)),
        runlog_sha256: sha256_hex(runlog_csv(log).as_bytes()),
        params_sha256: params_sha256(params),
        cell: info,
    }
}

fn write_cell(cfg: &ExperimentConfig, dir: &Path, info: &CellInfo, outcome: &RunOutcome, net: &Network) -> Result<CellSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("runlog.csv"), runlog_csv(&outcome.log))?;
    write_container(&dir.join("runlog.dlsd"), &[runlog_record(&outcome.log)?])?;
    if cfg.math {
        let mut names = Vec::new();
        for layer in net.layers() {
            if let Some(off) = layer.param_offset {
                names.push((off, format!("{}.weight", layer.name)));
                names.push((off + 1, format!("{}.bias", layer.name)));
            }
        }
        names.sort();
        let records: Vec<Record> = names
            .into_iter()
            .map(|(t, name)| Record::Array {
                names: vec![name],
                data: outcome.params[t].clone(),
            })
            .collect();
        if !records.is_empty() {
            write_container(&dir.join("model.dlsd"), &records)?;
        }
    }
    if let Some(d) = &outcome.log.divergence {
        write_json(&dir.join("divergence.json"), d)?;
    }
    write_json(&dir.join("cell.json"), info)?;
    let summary = summarize(cfg, info.clone(), &outcome.log, &outcome.params);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn execute(cfg: &ExperimentConfig, command: &str, cells: Vec<(PathBuf, Cell)>) -> Result<CommandOutcome> {
    write_manifest(cfg, command)?;
    let net = build_model(cfg)?;
    let data = if cfg.math { Some(load_or_generate(cfg)?) } else { None };
    let results: Vec<Result<CellSummary>> = cells
        .par_iter()
        .map(|(dir, cell)| {
            let outcome = run_cell(cfg, &net, data.as_ref(), cell)?;
            write_cell(cfg, dir, &cell.info, &outcome, &net)
        })
        .collect();
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let diverged = cells.iter().any(|c| c.run.diverged);
    Ok(CommandOutcome {
        out: cfg.out.clone(),
        cells,
        diverged,
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_manifest(cfg, "gen-data")?;
    let ds = load_or_generate(cfg)?;
    let name = match cfg.model {
        ModelKind::HepMini => "hep.dlsd",
        ModelKind::ClimateMini => "climate.dlsd",
    };
    let path = cfg.out.join(name);
    save_dataset(&ds, &path)?;
    Ok(path)
}

/// One run on `cluster.total_nodes` nodes with the single group count given.
pub fn train(cfg: &ExperimentConfig) -> Result<CommandOutcome> {
    let [groups] = cfg.cluster.groups[..] else {
        return Err(Error::Config(format!(
            "cluster.groups: train takes one group count, got {:?}",
            cfg.cluster.groups
        )));
    };
    let net = build_model(cfg)?;
    let plan = configure(cfg, plan_cluster(cfg.cluster.total_nodes, groups, &net)?);
    let info = CellInfo {
        label: "train".into(),
        mode: mode_label(groups),
        nodes: plan.worker_count(),
        groups,
        samples_per_update: batch_per_group(cfg, &plan),
        solver: cfg.solver,
        seed: cfg.seed,
    };
    execute(cfg, "train", vec![(cfg.out.clone(), Cell { info, plan })])
}

/// Node-count sweep over every group count, with the one-node synchronous
/// baseline always included. Node counts are compute nodes; each run gets
/// its parameter servers on top.
pub fn sweep_scaling(cfg: &ExperimentConfig, weak: bool) -> Result<CommandOutcome> {
    let mode_ok = matches!(
        (weak, cfg.cluster.batch),
        (false, BatchMode::Strong { .. }) | (true, BatchMode::Weak { .. })
    );
    if !mode_ok {
        let want = if weak { "weak" } else { "strong" };
        return Err(Error::Config(format!("cluster.batch: sweep needs {want} batch mode")));
    }
    let ps = build_model(cfg)?.trainable_layer_count();
    let mut grid: Vec<(usize, usize)> = vec![(1, 1)];
    for &g in &cfg.cluster.groups {
        for &n in &cfg.cluster.nodes {
            if n >= g && n % g == 0 && !grid.contains(&(g, n)) {
                grid.push((g, n));
            }
        }
    }
    let cells = grid
        .into_iter()
        .map(|(g, n)| {
            let plan = configure(cfg, ClusterPlan::from_workers(g, n / g, ps)?);
            let mode = mode_label(g);
            let label = format!("{mode}_n{n}");
            let info = CellInfo {
                label: label.clone(),
                mode,
                nodes: n,
                groups: g,
                samples_per_update: batch_per_group(cfg, &plan),
                solver: cfg.solver,
                seed: cfg.seed,
            };
            Ok((cfg.out.join(label), Cell { info, plan }))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = execute(cfg, if weak { "sweep-weak" } else { "sweep-strong" }, cells)?;
    report(&cfg.out, cfg.window, cfg.target_loss)?;
    Ok(outcome)
}

fn with_momentum(solver: &SolverConfig, m: f64, lr: f64) -> SolverConfig {
    let mut s = *solver;
    s.lr = lr;
    match s.kind {
        SolverKind::SgdMomentum => s.momentum = m,
        SolverKind::Adam => s.beta1 = m,
    }
    s
}

/// Momentum/learning-rate tuning across group counts on a fixed cluster:
/// synchronous runs keep the configured momentum, hybrid runs try every
/// value of `momentum_grid`.
pub fn sweep_groups(cfg: &ExperimentConfig) -> Result<CommandOutcome> {
    if !cfg.math {
        return Err(Error::Config("math: sweep-groups compares losses and needs math = true".into()));
    }
    let net = build_model(cfg)?;
    let lrs = if cfg.lr_grid.is_empty() { vec![cfg.solver.lr] } else { cfg.lr_grid.clone() };
    let mut cells = Vec::new();
    for &g in &cfg.cluster.groups {
        let plan = configure(cfg, plan_cluster(cfg.cluster.total_nodes, g, &net)?);
        let momenta: Vec<Option<f64>> = if g == 1 {
            vec![None]
        } else {
            cfg.momentum_grid.iter().map(|&m| Some(m)).collect()
        };
        for m in momenta {
            for &lr in &lrs {
                for r in 0..cfg.repeats {
                    let solver = match m {
                        Some(m) => with_momentum(&cfg.solver, m, lr),
                        None => SolverConfig { lr, ..cfg.solver },
                    };
                    let mode = mode_label(g);
                    let mut label = format!("{mode}_lr{lr}");
                    if let Some(m) = m {
                        label.push_str(&format!("_m{m}"));
                    }
                    if cfg.repeats > 1 {
                        label.push_str(&format!("_r{r}"));
                    }
                    let info = CellInfo {
                        label: label.clone(),
                        mode,
                        nodes: plan.worker_count(),
                        groups: g,
                        samples_per_update: batch_per_group(cfg, &plan),
                        solver,
                        seed: cfg.seed + r as u64,
                    };
                    cells.push((cfg.out.join(label), Cell { info, plan: plan.clone() }));
                }
            }
        }
    }
    let outcome = execute(cfg, "sweep-groups", cells)?;
    report(&cfg.out, cfg.window, cfg.target_loss)?;
    Ok(outcome)
}

/// Loads every run found in `dir` (the directory itself and its immediate
/// subdirectories holding `cell.json` and `runlog.csv`).
pub fn load_runs(dir: &Path) -> Result<Vec<(CellInfo, RunLog)>> {
    let mut dirs = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    let mut runs = Vec::new();
    for d in dirs {
        let (cell, csv) = (d.join("cell.json"), d.join("runlog.csv"));
        if !cell.is_file() || !csv.is_file() {
            continue;
        }
        let info: CellInfo = read_json(&cell)?;
        let records = parse_runlog_csv(&fs::read_to_string(&csv)?)?;
        let divergence = if d.join("divergence.json").is_file() {
            Some(read_json(&d.join("divergence.json"))?)
        } else {
            None
        };
        let log = RunLog {
            records,
            divergence,
            samples_per_update: info.samples_per_update,
            num_groups: info.groups,
        };
        runs.push((info, log));
    }
    if runs.is_empty() {
        return Err(Error::validation(format!("no run logs found under {}", dir.display())));
    }
    Ok(runs)
}

/// Re-analyzes saved run logs: `report.csv` per run, `scaling.csv`/`.svg`
/// when a one-node sync baseline exists, `time_to_loss.csv` when a target
/// loss is given.
pub fn report(dir: &Path, window: usize, target_loss: Option<f64>) -> Result<Vec<CellSummary>> {
    if window == 0 {
        return Err(Error::validation("window must be at least 1"));
    }
    let runs = load_runs(dir)?;
    let mut csv = String::from(
        "label,mode,nodes,groups,updates,sim_time_s,updates_per_s,peak_flops_per_s,sustained_flops_per_s,mean_staleness,final_loss,time_to_target_s\n",
    );
    let mut out = Vec::new();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (info, log) in &runs {
        let ps = peak_sustained(log, window).ok();
        let s = log.summary();
        let ttl = target_loss.and_then(|t| time_to_loss(log, t));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            info.label,
            info.mode,
            info.nodes,
            info.groups,
            s.updates,
            s.sim_time_s,
            s.updates_per_s,
            opt(ps.map(|p| p.0)),
            opt(ps.map(|p| p.1)),
            s.mean_staleness,
            opt(s.final_loss),
            opt(ttl),
        ));
        out.push(CellSummary {
            cell: info.clone(),
            run: s,
            peak_flops_per_s: ps.map(|p| p.0),
            sustained_flops_per_s: ps.map(|p| p.1),
            time_to_target_s: ttl,
            runlog_sha256: sha256_hex(runlog_csv(log).as_bytes()),
            params_sha256: String::new(),
        });
    }
    fs::write(dir.join("report.csv"), csv)?;
    let entries: Vec<ScalingEntry> = runs
        .iter()
        .map(|(info, log)| ScalingEntry {
            mode: info.mode.clone(),
            nodes: info.nodes,
            log: log.clone(),
        })
        .collect();
    if let Ok(rows) = scaling_report(&entries) {
        fs::write(dir.join("scaling.csv"), scaling_csv(&rows))?;
        fs::write(dir.join("scaling.svg"), scaling_svg(&rows))?;
    }
    if let Some(t) = target_loss {
        let named: Vec<(String, RunLog)> = runs.into_iter().map(|(i, l)| (i.label, l)).collect();
        fs::write(dir.join("time_to_loss.csv"), time_to_loss_csv(&time_to_loss_table(&named, t)))?;
    }
    Ok(out)
}
