use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::RunLog;
use crate::error::{Error, Result};

/// Peak and sustained FLOP rates.
///
/// Each group is a sequential stream of iterations: its peak is its fastest
/// iteration and its sustained rate is its best contiguous `window`. Groups
/// run concurrently, so the run's rates are the sums over groups.
pub fn peak_sustained(log: &RunLog, window: usize) -> Result<(f64, f64)> {
    if window == 0 {
        return Err(Error::validation("window must be at least 1"));
    }
    let groups: std::collections::BTreeSet<usize> = log.records.iter().map(|r| r.group).collect();
    if groups.is_empty() {
        return Err(Error::validation("run log has no iterations"));
    }
    let (mut peak, mut sustained) = (0.0, 0.0);
    for g in groups {
        let recs = log.group_records(g);
        let times: Vec<f64> = recs.iter().map(|r| r.end - r.start).collect();
        let flops: Vec<f64> = recs.iter().map(|r| r.flops as f64).collect();
        let (p, s) = stream_peak_sustained(&times, &flops, window)
            .map_err(|_| Error::validation(format!("group {g} has {} iterations, fewer than window {window}", times.len())))?;
        peak += p;
        sustained += s;
    }
    Ok((peak, sustained))
}

/// Peak and sustained rates of one sequential stream of iterations.
pub fn stream_peak_sustained(times: &[f64], flops: &[f64], window: usize) -> Result<(f64, f64)> {
    if window == 0 || times.len() < window || flops.len() != times.len() {
        return Err(Error::validation(format!(
            "need at least {window} iterations, got {}",
            times.len()
        )));
    }
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::validation("iteration times must be positive"));
    }
    let peak = times
        .iter()
        .zip(flops)
        .map(|(t, f)| f / t)
        .fold(0.0, f64::max);
    let sustained = times
        .windows(window)
        .zip(flops.windows(window))
        .map(|(t, f)| f.iter().sum::<f64>() / t.iter().sum::<f64>())
        .fold(0.0, f64::max);
    Ok((peak, sustained))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub mode: String,
    pub nodes: usize,
    /// Samples per simulated second.
    pub throughput: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

/// One run of a sweep; `mode` is e.g. `sync` or `hybrid-4`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingEntry {
    pub mode: String,
    pub nodes: usize,
    pub log: RunLog,
}

pub const BASELINE_MODE: &str = "sync";

/// Steady-state samples per simulated second.
pub fn throughput(log: &RunLog) -> f64 {
    log.update_rate() * log.samples_per_update as f64
}

/// Speedup of every entry relative to the one-node synchronous run.
///
/// Speedup is the ratio of sample throughputs, which for a fixed batch per
/// update is the ratio of times per update. Efficiency is speedup / nodes.
pub fn scaling_report(entries: &[ScalingEntry]) -> Result<Vec<ScalingRow>> {
    let base = entries
        .iter()
        .find(|e| e.mode == BASELINE_MODE && e.nodes == 1)
        .ok_or_else(|| Error::validation("scaling report needs a one-node sync baseline"))?;
    let base_thr = throughput(&base.log);
    if !(base_thr > 0.0) {
        return Err(Error::validation("baseline run has no measurable throughput"));
    }
    let mut rows: Vec<ScalingRow> = entries
        .iter()
        .map(|e| {
            let thr = throughput(&e.log);
            let speedup = thr / base_thr;
            ScalingRow {
                mode: e.mode.clone(),
                nodes: e.nodes,
                throughput: thr,
                speedup,
                efficiency: speedup / e.nodes as f64,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.nodes.cmp(&b.nodes)));
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("mode,nodes,throughput_samples_per_s,speedup,efficiency\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.mode, r.nodes, r.throughput, r.speedup, r.efficiency);
    }
    out
}

/// Log-log line chart of speedup against node count, one line per mode.
pub fn scaling_svg(rows: &[ScalingRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let finite = |v: f64| v > 0.0 && v.is_finite();
    let xs: Vec<f64> = rows.iter().map(|r| r.nodes as f64).filter(|&v| finite(v)).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.speedup).filter(|&v| finite(v)).collect();
    let lo_hi = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min).max(1e-9).log2();
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-9).log2();
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let ((x0, x1), (y0, y1)) = if xs.is_empty() || ys.is_empty() {
        ((0.0, 1.0), (0.0, 1.0))
    } else {
        (lo_hi(&xs), lo_hi(&ys))
    };
    let px = |v: f64| M + (v.log2() - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |v: f64| H - M - (v.log2() - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{t}\" text-anchor=\"middle\">nodes (log2)</text>\n\
         <text x=\"14\" y=\"{cy}\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">speedup (log2)</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        t = H - 12.0,
        cy = H / 2.0,
    );
    let mut modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    modes.dedup();
    for (k, mode) in modes.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.mode == *mode && finite(r.speedup))
            .map(|r| format!("{:.1},{:.1}", px(r.nodes as f64), py(r.speedup)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{mode}</text>",
            M + 10.0,
            M + 16.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
