use std::fmt::Write as _;

use crate::cluster::{IterRecord, RunLog};
use crate::datagen::Record;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RUNLOG_HEADER: &str = "iter,group,sim_time_start_s,sim_time_end_s,loss,global_step,staleness,flops";

/// Run log as CSV; floats use the shortest round-trip representation and an
/// absent loss is an empty field.
pub fn runlog_csv(log: &RunLog) -> String {
    let mut out = String::with_capacity(64 * (log.records.len() + 1));
    out.push_str(RUNLOG_HEADER);
    out.push('\n');
    for r in &log.records {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.group, r.start, r.end, loss, r.global_step, r.staleness, r.flops
        );
    }
    out
}

/// Parses [`runlog_csv`] output back into records.
pub fn parse_runlog_csv(text: &str) -> Result<Vec<IterRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == RUNLOG_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected run log header {:?}",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.trim_end().split(',').collect();
            let bad = |what: &str| Error::Format(format!("run log line {}: bad {what}: {line}", i + 2));
            if f.len() != 8 {
                return Err(bad("field count"));
            }
            Ok(IterRecord {
                iter: f[0].parse().map_err(|_| bad("iter"))?,
                group: f[1].parse().map_err(|_| bad("group"))?,
                start: f[2].parse().map_err(|_| bad("start"))?,
                end: f[3].parse().map_err(|_| bad("end"))?,
                loss: if f[4].is_empty() {
                    None
                } else {
                    Some(f[4].parse().map_err(|_| bad("loss"))?)
                },
                global_step: f[5].parse().map_err(|_| bad("global_step"))?,
                staleness: f[6].parse().map_err(|_| bad("staleness"))?,
                flops: f[7].parse().map_err(|_| bad("flops"))?,
            })
        })
        .collect()
}

/// Run log as a container array record (absent losses stored as NaN).
pub fn runlog_record(log: &RunLog) -> Result<Record> {
    let names: Vec<String> = RUNLOG_HEADER.split(',').map(String::from).collect();
    let mut data = Vec::with_capacity(8 * log.records.len());
    for r in &log.records {
        data.extend_from_slice(&[
            r.iter as f64,
            r.group as f64,
            r.start,
            r.end,
            r.loss.unwrap_or(f64::NAN),
            r.global_step as f64,
            r.staleness as f64,
            r.flops as f64,
        ]);
    }
    let rows = log.records.len().max(1);
    if log.records.is_empty() {
        data = vec![f64::NAN; 8];
    }
    Ok(Record::Array {
        names,
        data: Tensor::from_vec(&[rows, 8], data)?,
    })
}

/// First simulated time at which the trailing mean of the last five losses
/// (fewer at the start) is at or below `target`; `None` if never.
pub fn time_to_loss(log: &RunLog, target: f64) -> Option<f64> {
    const SMOOTH: usize = 5;
    let losses: Vec<(f64, f64)> = log
        .records
        .iter()
        .filter_map(|r| r.loss.map(|l| (l, r.end)))
        .collect();
    (0..losses.len()).find_map(|k| {
        let lo = (k + 1).saturating_sub(SMOOTH);
        let window = &losses[lo..=k];
        let mean = window.iter().map(|(l, _)| l).sum::<f64>() / window.len() as f64;
        (mean <= target).then_some(losses[k].1)
    })
}

/// `(label, seconds)` for each run; `None` means the target was never reached.
pub fn time_to_loss_table(runs: &[(String, RunLog)], target: f64) -> Vec<(String, Option<f64>)> {
    runs.iter()
        .map(|(name, log)| (name.clone(), time_to_loss(log, target)))
        .collect()
}

pub fn time_to_loss_csv(rows: &[(String, Option<f64>)]) -> String {
    let mut out = String::from("config,sim_seconds_to_target\n");
    for (name, t) in rows {
        let _ = writeln!(out, "{name},{}", t.map_or_else(|| "never".to_string(), |v| v.to_string()));
    }
    out
}
