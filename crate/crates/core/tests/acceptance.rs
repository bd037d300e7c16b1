//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{dot, fd_max_rel, randn, rng};
use hybridtrain::cluster::*;
use hybridtrain::datagen::*;
use hybridtrain::models::*;
use hybridtrain::perf::*;
use hybridtrain::solvers::SolverConfig;
use hybridtrain::tensor::*;
use hybridtrain::Tensor;
use rand::Rng;
use serde_json::{json, Value};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Moves every bias off zero so no ReLU sits exactly on its kink.
fn generic_point(net: &Network, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    let mut params = net.params.clone();
    for layer in net.layers() {
        if let Some(off) = layer.param_offset {
            for v in params[off + 1].data_mut() {
                *v = 0.1 * r.random::<f64>() - 0.05;
            }
        }
    }
    params
}

fn layer_fd_worst() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed);
        let spec = ConvSpec::square(2, 3, 3, 1 + (seed as usize % 2), 1);
        let x = randn(&mut r, &[2, 2, 6, 6]);
        let w = randn(&mut r, &spec.weight_shape());
        let b = randn(&mut r, &[3]);
        let out = conv2d_forward(&x, &w, &b, &spec).unwrap();
        let cot = randn(&mut r, out.shape());
        let (gx, gw, gb) = conv2d_backward(&x, &w, &cot, &spec).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv2d_forward(x, w, b, &spec).unwrap(), &cot);
        worst = worst
            .max(fd_max_rel(&x, &gx, 1e-5, |v| f(v, &w, &b)))
            .max(fd_max_rel(&w, &gw, 1e-5, |v| f(&x, v, &b)))
            .max(fd_max_rel(&b, &gb, 1e-5, |v| f(&x, &w, v)));

        let dx = randn(&mut r, &[2, 3, 3, 3]);
        let dspec = ConvSpec::square(2, 3, 4, 2, 1);
        let dw = randn(&mut r, &dspec.weight_shape());
        let dout = deconv2d_forward(&dx, &dw, &dspec).unwrap();
        let dcot = randn(&mut r, dout.shape());
        let (gdx, gdw) = deconv2d_backward(&dx, &dw, &dcot, &dspec).unwrap();
        let g = |x: &Tensor, w: &Tensor| dot(&deconv2d_forward(x, w, &dspec).unwrap(), &dcot);
        worst = worst
            .max(fd_max_rel(&dx, &gdx, 1e-5, |v| g(v, &dw)))
            .max(fd_max_rel(&dw, &gdw, 1e-5, |v| g(&dx, v)));

        let xin = randn(&mut r, &[3, 5]);
        let wd = randn(&mut r, &[5, 2]);
        let bd = randn(&mut r, &[2]);
        let c = randn(&mut r, &[3, 2]);
        let (gi, gw2, gb2) = dense_backward(&xin, &wd, &c).unwrap();
        let h = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&dense_forward(x, w, b).unwrap(), &c);
        worst = worst
            .max(fd_max_rel(&xin, &gi, 1e-5, |v| h(v, &wd, &bd)))
            .max(fd_max_rel(&wd, &gw2, 1e-5, |v| h(&xin, v, &bd)))
            .max(fd_max_rel(&bd, &gb2, 1e-5, |v| h(&xin, &wd, v)));

        let mut px = randn(&mut r, &[1, 2, 4, 4]);
        for v in px.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let pc = randn(&mut r, &[1, 2, 4, 4]);
        worst = worst.max(fd_max_rel(&px, &relu_backward(&px, &pc).unwrap(), 1e-5, |v| dot(&relu_forward(v), &pc)));
        for kind in [PoolKind::Max2x2Stride2, PoolKind::GlobalAvg] {
            let (po, st) = pool_forward(&px, kind).unwrap();
            let c = randn(&mut r, po.shape());
            let gp = pool_backward(&c, &st, kind).unwrap();
            worst = worst.max(fd_max_rel(&px, &gp, 1e-5, |v| dot(&pool_forward(v, kind).unwrap().0, &c)));
        }
        let logits = randn(&mut r, &[3, 4]);
        let (_, gl) = softmax_xent(&logits, &[0, 3, 1]).unwrap();
        worst = worst.max(fd_max_rel(&logits, &gl, 1e-5, |v| softmax_xent(v, &[0, 3, 1]).unwrap().0));
    }
    worst
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let layer = layer_fd_worst();
    let mut hep = build_hep_mini(&HepConfig::default()).unwrap();
    hep.init_params(21);
    let hd = gen_hep(21, 4, 0.5).unwrap();
    let hep_err = grad_check(&hep, &generic_point(&hep, 1), &hd.batch(&[0, 1]).unwrap(), 1e-3).unwrap();
    let mut cl = build_climate_mini(&ClimateConfig::default()).unwrap();
    cl.init_params(22);
    let cd = gen_climate(22, 2).unwrap();
    let cl_err = grad_check(&cl, &generic_point(&cl, 2), &cd.batch(&[0, 1]).unwrap(), 1e-3).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        layer < 1e-6 && hep_err < 1e-4 && cl_err < 1e-4 && secs < 60.0,
        format!("per-layer {layer:.2e} (< 1e-6), hep-mini {hep_err:.2e}, climate-mini {cl_err:.2e} (< 1e-4), {secs:.1} s (< 60 s)"),
    )
}

fn criterion_2() -> Outcome {
    let mut identical = 0;
    for seed in 0..50u64 {
        let mut r = rng(100 + seed);
        let k = r.random_range(1..=4);
        let spec = ConvSpec::square(r.random_range(1..=3), r.random_range(1..=3), k, r.random_range(1..=3), r.random_range(0..k));
        let (h, w) = loop {
            let (h, w) = (r.random_range(1..6), r.random_range(1..6));
            if let Ok((oh, ow)) = spec.deconv_output_hw(h, w) {
                if spec.output_hw(oh, ow).ok() == Some((h, w)) {
                    break (h, w);
                }
            }
        };
        let n = r.random_range(1..=2);
        let x = randn(&mut r, &[n, spec.out_channels, h, w]);
        let wt = randn(&mut r, &spec.weight_shape());
        let d = deconv2d_forward(&x, &wt, &spec).unwrap();
        let zeros = Tensor::zeros(&[n, spec.in_channels, d.shape()[2], d.shape()[3]]);
        let (gi, _, _) = conv2d_backward(&zeros, &wt, &x, &spec).unwrap();
        if d.shape() == gi.shape() && d.data().iter().zip(gi.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            identical += 1;
        }
    }
    outcome(identical == 50, format!("{identical}/50 combinations bit-identical"))
}

fn hep_net(filters: usize, seed: u64) -> Network {
    let mut net = build_hep_mini(&HepConfig {
        filters,
        ..HepConfig::default()
    })
    .unwrap();
    net.init_params(seed);
    net
}

fn criterion_3() -> Outcome {
    let net = hep_net(16, 31);
    let data = Dataset::Hep(gen_hep(31, 2000, 0.3).unwrap());
    let solver = SolverConfig::adam(1e-3);
    let plan = plan_cluster(14, 1, &net).unwrap();
    let sim = run_training(&plan, &net, &data, &solver, 16, 100, 5).unwrap();
    let (losses, params) = reference_sync_training(&net, &data, &solver, 16, 100, 5).unwrap();
    let sim_losses: Vec<f64> = sim.log.losses().into_iter().flatten().collect();
    let same_losses = sim_losses.len() == 100 && sim_losses.iter().zip(&losses).all(|(a, b)| a.to_bits() == b.to_bits());
    let same_params = sim.params == params;
    let stale = sim.log.records.iter().all(|r| r.staleness == 0);
    outcome(
        plan.worker_count() == 8 && same_losses && same_params && stale,
        format!(
            "{} workers, loss series identical: {same_losses}, final params identical: {same_params}, staleness all 0: {stale}",
            plan.worker_count()
        ),
    )
}

fn criterion_4(logs: &mut Vec<RunLog>) -> Outcome {
    let net = hep_net(16, 1);
    let mut exact = true;
    let mut means = Vec::new();
    for g in [2usize, 4, 8] {
        let mut plan = ClusterPlan::from_workers(g, 4, net.trainable_layer_count()).unwrap();
        plan.network.jitter_sigma = 0.0;
        plan.compute.straggler_probability = 0.0;
        let log = run_timing(&plan, &net, 32, 500, 3).unwrap();
        exact &= log.records.iter().filter(|r| r.global_step > g as u64).all(|r| r.staleness == g as u64 - 1);
        logs.push(log);
        let mut plan = ClusterPlan::from_workers(g, 4, net.trainable_layer_count()).unwrap();
        plan.network.jitter_sigma = 0.1;
        let log = run_timing(&plan, &net, 32, 500, 3).unwrap();
        means.push((g, log.summary().mean_staleness));
        logs.push(log);
    }
    let within = means.iter().all(|&(g, m)| (m - (g as f64 - 1.0)).abs() <= 0.5);
    outcome(
        exact && within,
        format!("zero jitter exact G-1: {exact}; sigma 0.1 mean staleness {means:?} (within 0.5 of G-1)"),
    )
}

/// Speedups keyed by (mode, nodes) from a strong-scaling sweep.
fn strong_sweep(logs: &mut Vec<RunLog>) -> Vec<ScalingRow> {
    let net = hep_net(128, 1);
    let ps = net.trainable_layer_count();
    let mut entries = Vec::new();
    for g in [1usize, 2, 4] {
        for e in 0..=10 {
            let n = 1usize << e;
            if n < g {
                continue;
            }
            let plan = ClusterPlan::from_workers(g, n / g, ps).unwrap();
            let log = run_timing(&plan, &net, 2048, 200, 11).unwrap();
            let mode = if g == 1 { "sync".to_string() } else { format!("hybrid-{g}") };
            entries.push(ScalingEntry { mode, nodes: n, log });
        }
    }
    logs.extend(entries.iter().map(|e| e.log.clone()));
    scaling_report(&entries).unwrap()
}

fn speedup(rows: &[ScalingRow], mode: &str, nodes: usize) -> f64 {
    rows.iter().find(|r| r.mode == mode && r.nodes == nodes).unwrap().speedup
}

fn criterion_5(logs: &mut Vec<RunLog>) -> Outcome {
    let t0 = Instant::now();
    let rows = strong_sweep(logs);
    let secs = t0.elapsed().as_secs_f64();
    let (s256, s1024, h1024) = (speedup(&rows, "sync", 256), speedup(&rows, "sync", 1024), speedup(&rows, "hybrid-4", 1024));
    outcome(
        s1024 < s256 && h1024 >= 1.5 * s1024 && secs < 600.0,
        format!(
            "sync speedup 256: {s256:.1}, 1024: {s1024:.1}; hybrid-4 at 1024: {h1024:.1} ({:.2}x sync, >= 1.5x); {secs:.1} s",
            h1024 / s1024
        ),
    )
}

fn weak_efficiency(net: &Network, compute: ComputeModel, groups: usize, logs: &mut Vec<RunLog>) -> f64 {
    let ps = net.trainable_layer_count();
    let mut base_plan = ClusterPlan::from_workers(1, 1, ps).unwrap();
    base_plan.compute = compute.clone();
    let base = run_timing(&base_plan, net, 8, 60, 13).unwrap();
    let mut plan = ClusterPlan::from_workers(groups, 1024 / groups, ps).unwrap();
    plan.compute = compute;
    let log = run_timing(&plan, net, 8 * 1024 / groups, 60, 13).unwrap();
    let eff = throughput(&log) / throughput(&base) / 1024.0;
    logs.push(base);
    logs.push(log);
    eff
}

fn criterion_6(logs: &mut Vec<RunLog>) -> Outcome {
    let hep = hep_net(128, 1);
    let mut climate = build_climate_mini(&ClimateConfig::default()).unwrap();
    climate.init_params(1);
    let ratio = ComputeModel::climate().node_time(8) / ComputeModel::hep().node_time(8);
    let mut rows = Vec::new();
    for g in [1usize, 2, 4, 8] {
        let c = weak_efficiency(&climate, ComputeModel::climate(), g, logs);
        let h = weak_efficiency(&hep, ComputeModel::hep(), g, logs);
        rows.push((g, c, h));
    }
    let pass = ratio >= 25.0 && rows.iter().all(|&(_, c, h)| c >= 0.85 && h < c);
    let detail = rows
        .iter()
        .map(|(g, c, h)| format!("G={g} climate {c:.3} hep {h:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("compute ratio {ratio:.1}x; efficiency at 1024: {detail}"))
}

fn criterion_7() -> Outcome {
    let hep = build_hep_mini(&HepConfig::default()).unwrap();
    let climate = build_climate_mini(&ClimateConfig {
        encoder_convs: 9,
        decoder_deconvs: 5,
        ..ClimateConfig::default()
    })
    .unwrap();
    let a = plan_cluster(9600, 9, &hep).unwrap();
    let b = plan_cluster(9622, 8, &climate).unwrap();
    let got = (
        (a.worker_count(), a.ps_nodes, a.workers_per_group),
        (b.worker_count(), b.ps_nodes, b.workers_per_group),
    );
    outcome(got == ((9594, 6, 1066), (9608, 14, 1201)), format!("{got:?}"))
}

fn criterion_8(logs: &mut Vec<RunLog>) -> Outcome {
    let t0 = Instant::now();
    let golden: Value = serde_json::from_str(include_str!("golden/hep_baseline.json")).unwrap();
    let base = golden["tpr"].as_f64().unwrap();
    let fpr = golden["target_fpr"].as_f64().unwrap();
    let d = gen_hep(
        golden["data_seed"].as_u64().unwrap(),
        golden["n"].as_u64().unwrap() as usize,
        golden["signal_fraction"].as_f64().unwrap(),
    )
    .unwrap();
    let ds = Dataset::Hep(d.clone());
    let net = hep_net(16, 7);
    let plan = ClusterPlan::from_workers(2, 32, net.trainable_layer_count()).unwrap();
    let out = run_training(&plan, &net, &ds, &SolverConfig::adam(1e-3), 64, 300, 7).unwrap();
    let test = ds.indices(Split::Test);
    let mut scores = Vec::new();
    for chunk in test.chunks(256) {
        let o = net.forward(&out.params, &d.batch(chunk).unwrap().input).unwrap();
        let logits = o.last().unwrap();
        scores.extend((0..chunk.len()).map(|r| logits.data()[2 * r + 1] - logits.data()[2 * r]));
    }
    let cnn = roc_tpr_at_fpr(&scores, &d.labels(&test), fpr).unwrap();
    logs.push(out.log);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        cnn > base && cnn / base >= 1.2 && secs < 900.0,
        format!("cnn TPR {cnn:.3} vs baseline {base:.3} at FPR {fpr} (ratio {:.2}, >= 1.2); {secs:.1} s", cnn / base),
    )
}

fn criterion_9(logs: &[RunLog]) -> Outcome {
    let hep = build_hep_mini(&HepConfig::default()).unwrap();
    let climate = build_climate_mini(&ClimateConfig::default()).unwrap();
    let (mut layers, mut matched) = (0, 0);
    for net in [&hep, &climate] {
        for layer in net.layers() {
            layers += 1;
            if layer_flops(layer, 2) == common::counted(layer, 2) {
                matched += 1;
            }
        }
    }
    let (mut checked, mut ordered) = (0, 0);
    for log in logs {
        if let Ok((peak, sustained)) = peak_sustained(log, 10) {
            checked += 1;
            if peak >= sustained {
                ordered += 1;
            }
        }
    }
    let net = hep_net(16, 1);
    let mut conserved = true;
    for g in [1usize, 2, 4] {
        let plan = ClusterPlan::from_workers(g, 8, net.trainable_layer_count()).unwrap();
        let log = run_timing(&plan, &net, 32, 120, 2).unwrap();
        conserved &= log.records.iter().map(|r| r.flops).sum::<u64>() == 120 * model_flops(&net, 32);
    }
    outcome(
        matched == layers && checked > 0 && ordered == checked && conserved,
        format!("layer FLOPs {matched}/{layers} exact; peak >= sustained on {ordered}/{checked} run logs; work conserved: {conserved}"),
    )
}

fn cli(args: &[&str], out: &Path, threads: &str, extra: &[&Path]) -> bool {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hybridtrain"));
    cmd.args(args).args(extra).arg("--out").arg(out).env("HYBRIDTRAIN_THREADS", threads);
    cmd.output().map(|o| o.status.success()).unwrap_or(false)
}

fn tree_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let cfg = json!({
        "model": "hep_mini",
        "hep": { "filters": 8 },
        "data": { "seed": 4, "n": 600, "signal_fraction": 0.3 },
        "solver": { "kind": "adam", "lr": 0.001 },
        "cluster": { "total_nodes": 22, "groups": [1, 2, 4], "nodes": [1, 4, 16], "batch": { "strong": { "total_batch": 16 } } },
        "iterations": 24,
        "window": 4,
        "seed": 3,
    });
    std::fs::write(&config, cfg.to_string()).unwrap();
    let mut results = Vec::new();
    for (command, set) in [("train", Some("cluster.groups=2")), ("sweep-strong", None)] {
        let first = dir.path().join(format!("{command}-1"));
        let mut args = vec![command, "--config"];
        if let Some(s) = set {
            args.splice(1..1, ["--set", s]);
        }
        let a = cli(&args, &first, "1", &[&config]);
        let manifest = first.join("manifest.json");
        let second = dir.path().join(format!("{command}-4"));
        let b = cli(&[command, "--manifest"], &second, "4", &[&manifest]);
        let (fa, fb) = (tree_files(&first), tree_files(&second));
        results.push((command, a && b && !fa.is_empty() && fa == fb, fa.len()));
    }
    let pass = results.iter().all(|r| r.1);
    let detail = results
        .iter()
        .map(|(c, ok, n)| format!("{c}: {n} files identical under 1 vs 4 threads: {ok}"))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn criterion_11(logs: &mut Vec<RunLog>) -> Outcome {
    let net = hep_net(128, 1);
    let ps = net.trainable_layer_count();
    let sync = ClusterPlan::from_workers(1, 64, ps).unwrap();
    let hybrid = ClusterPlan::from_workers(4, 16, ps).unwrap();
    let per_update = |log: &RunLog| 1.0 / log.update_rate();
    let a = run_timing(&sync, &net, 2048, 200, 17).unwrap();
    let b = run_timing(&inject_degradation(sync.clone(), 5, 10.0).unwrap(), &net, 2048, 200, 17).unwrap();
    let c = run_timing(&hybrid, &net, 2048, 400, 17).unwrap();
    let d = run_timing(&inject_degradation(hybrid.clone(), 5, 10.0).unwrap(), &net, 2048, 400, 17).unwrap();
    let sync_slowdown = per_update(&b) / per_update(&a);
    let cadence_loss = c.update_rate() / d.update_rate();
    logs.extend([a, b, c, d]);
    outcome(
        sync_slowdown >= 5.0 && cadence_loss <= 1.5,
        format!("sync time per update x{sync_slowdown:.2} (>= 5); hybrid-4 cadence degraded x{cadence_loss:.3} (<= 1.5)"),
    )
}

fn criterion_12(logs: &mut Vec<RunLog>) -> Outcome {
    let t0 = Instant::now();
    let d = gen_climate(3, 2000).unwrap();
    let ds = Dataset::Climate(d.clone());
    let mut cfg = ClimateConfig::default();
    cfg.loss_weights.conf_obj = 5.0;
    let mut net = build_climate_mini(&cfg).unwrap();
    net.init_params(3);
    let plan = ClusterPlan::from_workers(1, 8, net.trainable_layer_count()).unwrap();
    let out = run_training(&plan, &net, &ds, &SolverConfig::sgd(1e-3, 0.9), 8, 600, 3).unwrap();
    let thresholds = [0.5, 0.8, 0.95, 0.99];
    let (mut total, mut found, mut monotone) = (0, 0, true);
    for chunk in ds.indices(Split::Val).chunks(32) {
        let o = net.forward(&out.params, &d.batch(chunk).unwrap().input).unwrap();
        let det = DetectionOutput::from_outputs(&o).unwrap();
        let preds: Vec<_> = thresholds.iter().map(|&t| infer_boxes(&det, t).unwrap()).collect();
        for (k, &i) in chunk.iter().enumerate() {
            monotone &= preds.windows(2).all(|p| p[1][k].len() <= p[0][k].len());
            for b in d.samples[i].boxes.iter().filter(|b| b.class == 0) {
                total += 1;
                let (row, col) = b.cell(cfg.grid);
                if preds[1][k].iter().any(|p| p.row == row && p.col == col && p.class == 0) {
                    found += 1;
                }
            }
        }
    }
    logs.push(out.log);
    let recall = found as f64 / total as f64;
    outcome(
        monotone && recall >= 0.5,
        format!(
            "monotone in threshold: {monotone}; vortex recall at 0.8 {found}/{total} = {recall:.3} (>= 0.5); {:.1} s",
            t0.elapsed().as_secs_f64()
        ),
    )
}

#[test]
fn acceptance() {
    let mut logs = Vec::new();
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o.pass));
    };
    record(1, "gradient fidelity", criterion_1());
    record(2, "deconv identity", criterion_2());
    record(3, "sync equivalence", criterion_3());
    record(4, "staleness law", criterion_4(&mut logs));
    record(5, "strong scaling shape", criterion_5(&mut logs));
    record(6, "weak scaling shape", criterion_6(&mut logs));
    record(7, "plan accounting", criterion_7());
    record(8, "classifier vs baseline", criterion_8(&mut logs));
    record(11, "straggler resilience", criterion_11(&mut logs));
    record(12, "detection inference", criterion_12(&mut logs));
    record(9, "FLOP accounting", criterion_9(&logs));
    record(10, "determinism", criterion_10());
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
