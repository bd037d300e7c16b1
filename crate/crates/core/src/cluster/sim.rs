use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::plan::ClusterPlan;
use super::runlog::{DivergenceRecord, IterRecord, RunLog, RunOutcome};
use super::timing::{allreduce_time_jittered, broadcast_time};
use crate::datagen::{stream, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{Batch, Network};
use crate::perf::model_flops;
use crate::solvers::{SolverConfig, SolverState};
use crate::tensor::Tensor;

/// Bytes per parameter on the wire (single precision).
pub const WIRE_BYTES_PER_PARAM: usize = 4;

const BATCH_STREAM: u64 = 0x0042_4154_4348;
const NET_STREAM: u64 = 0x004e_4554;
const STRAGGLER_STREAM: u64 = 0x0053_5452_4147;

/// Draws each group's minibatches with replacement from the training split,
/// one seeded stream per group.
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    train: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, seed: u64, group: usize) -> Result<Self> {
        let train = dataset.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::validation("dataset has no training samples"));
        }
        Ok(BatchSampler {
            dataset,
            train,
            rng: stream(seed, &[BATCH_STREAM, group as u64]),
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Batch> {
        let idx: Vec<usize> = (0..size)
            .map(|_| self.train[self.rng.random_range(0..self.train.len())])
            .collect();
        match self.dataset {
            Dataset::Hep(d) => d.batch(&idx),
            Dataset::Climate(d) => d.batch(&idx),
        }
    }
}

/// Authoritative copy of one shard plus its solver state.
struct ParamServer {
    tensors: Vec<Tensor>,
    version: u64,
    solver: Option<SolverState>,
}

fn shard_grads(net: &Network, grads: &[Tensor], shard: usize) -> Vec<Tensor> {
    net.shards[shard].tensors.iter().map(|&t| grads[t].clone()).collect()
}

fn install(net: &Network, params: &mut [Tensor], shard: usize, tensors: &[Tensor]) {
    for (&t, v) in net.shards[shard].tensors.iter().zip(tensors) {
        params[t] = v.clone();
    }
}

/// Mini-batch training outside the simulator: the same batches as group 0,
/// the same gradient, the same per-shard solver states, applied in order.
pub fn reference_sync_training(
    model: &Network,
    dataset: &Dataset,
    solver: &SolverConfig,
    batch_size: usize,
    iterations: u64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    solver.validate()?;
    let mut params = model.params.clone();
    let mut states = (0..model.shards.len())
        .map(|s| SolverState::new(*solver, &model.shard_tensors(&params, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut sampler = BatchSampler::new(dataset, seed, 0)?;
    let mut losses = Vec::with_capacity(iterations as usize);
    for step in 0..iterations {
        let batch = sampler.next_batch(batch_size)?;
        let (loss, grads) = model.loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                layer: "loss".into(),
                step,
                detail: format!("loss {loss}"),
            });
        }
        for (s, state) in states.iter_mut().enumerate() {
            let mut tensors = model.shard_tensors(&params, s);
            state.apply(&mut tensors, &shard_grads(model, &grads, s), &model.shards[s].name)?;
            install(model, &mut params, s, &tensors);
        }
        losses.push(loss);
    }
    Ok((losses, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Start,
    ComputeDone { iter: u64 },
    Arrive { iter: u64 },
    Install { iter: u64 },
}

#[derive(Debug)]
struct Event {
    time: f64,
    group: usize,
    layer: usize,
    seq: u64,
    kind: Kind,
}

impl Event {
    fn key(&self) -> (f64, usize, usize, u64) {
        (self.time, self.group, self.layer, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    /// Reversed so the max-heap pops the earliest event; ties go to the
    /// lower group, then the lower layer, then insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0)
            .then(b.1.cmp(&a.1))
            .then(b.2.cmp(&a.2))
            .then(b.3.cmp(&a.3))
    }
}

struct InFlight {
    start: f64,
    read_versions: Vec<u64>,
    grads: Option<Vec<Tensor>>,
    loss: Option<f64>,
    remaining: usize,
    staleness: u64,
    last_return: f64,
    snapshots: Vec<Option<(u64, Vec<Tensor>)>>,
}

struct Group<'a> {
    params: Vec<Tensor>,
    versions: Vec<u64>,
    next_iter: u64,
    sampler: Option<BatchSampler<'a>>,
}

struct Sim<'a> {
    plan: &'a ClusterPlan,
    net: &'a Network,
    batch: usize,
    iterations: u64,
    flops: u64,
    shard_bytes: Vec<usize>,
    total_bytes: usize,
    ps: Vec<ParamServer>,
    groups: Vec<Group<'a>>,
    inflight: BTreeMap<(usize, u64), InFlight>,
    queue: BinaryHeap<Event>,
    seq: u64,
    started: u64,
    global_step: u64,
    records: Vec<IterRecord>,
    divergence: Option<DivergenceRecord>,
    net_rng: ChaCha8Rng,
    straggler_rng: ChaCha8Rng,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: f64, group: usize, layer: usize, kind: Kind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            group,
            layer,
            seq: self.seq,
            kind,
        });
    }

    fn diverge(&mut self, group: usize, iter: u64, time: f64, detail: String) {
        self.divergence = Some(DivergenceRecord {
            group,
            iter,
            global_step: self.global_step,
            time,
            detail,
        });
    }

    /// Slowest worker of the group, including stragglers and degradation.
    fn compute_time(&mut self, group: usize) -> f64 {
        let plan = self.plan;
        let w = plan.workers_per_group;
        let (base, extra) = (self.batch / w, self.batch % w);
        let mut slowest: f64 = 0.0;
        for (k, node) in plan.group_nodes(group).enumerate() {
            let samples = base + usize::from(k < extra);
            let mut t = plan.compute.node_time(samples);
            if plan.compute.straggler_probability > 0.0
                && self.straggler_rng.random::<f64>() < plan.compute.straggler_probability
            {
                t *= plan.compute.straggler_slowdown;
            }
            if let Some(&s) = plan.degradation.get(&node) {
                t *= s;
            }
            slowest = slowest.max(t);
        }
        slowest
    }

    fn checkpoint_cost(&self) -> f64 {
        let c = &self.plan.checkpoint;
        if c.cost_s > 0.0 && c.every > 0 && self.global_step.is_multiple_of(c.every) {
            c.cost_s
        } else {
            0.0
        }
    }

    fn start(&mut self, g: usize, t: f64) -> Result<()> {
        if self.started >= self.iterations {
            return Ok(());
        }
        self.started += 1;
        let iter = self.groups[g].next_iter;
        self.groups[g].next_iter += 1;
        let (mut loss, mut grads) = (None, None);
        if self.groups[g].sampler.is_some() {
            let group = &mut self.groups[g];
            let batch = group.sampler.as_mut().expect("checked").next_batch(self.batch)?;
            let (l, gr) = self.net.loss_and_grad(&group.params, &batch)?;
            if !l.is_finite() {
                self.diverge(g, iter, t, format!("non-finite loss {l}"));
                return Ok(());
            }
            loss = Some(l);
            grads = Some(gr);
        }
        let compute = self.compute_time(g);
        let reduce = allreduce_time_jittered(
            self.total_bytes,
            self.plan.workers_per_group,
            &self.plan.network,
            &mut self.net_rng,
        );
        let shards = self.ps.len();
        self.inflight.insert(
            (g, iter),
            InFlight {
                start: t,
                read_versions: self.groups[g].versions.clone(),
                grads,
                loss,
                remaining: shards,
                staleness: 0,
                last_return: t,
                snapshots: vec![None; shards],
            },
        );
        self.push(t + compute + reduce, g, 0, Kind::ComputeDone { iter });
        Ok(())
    }

    /// Applies one shard's update on its server; returns false on divergence.
    fn apply(&mut self, g: usize, iter: u64, shard: usize, t: f64) -> Result<bool> {
        let f = self.inflight.get(&(g, iter)).expect("in-flight update");
        let ps = &mut self.ps[shard];
        let stale = ps.version - f.read_versions[shard];
        if let (Some(state), Some(grads)) = (ps.solver.as_mut(), f.grads.as_ref()) {
            let sg = shard_grads(self.net, grads, shard);
            if let Err(e) = state.apply(&mut ps.tensors, &sg, &self.net.shards[shard].name) {
                if e.is_divergence() {
                    self.diverge(g, iter, t, e.to_string());
                    return Ok(false);
                }
                return Err(e);
            }
        }
        ps.version += 1;
        let snapshot = (ps.version, ps.tensors.clone());
        let f = self.inflight.get_mut(&(g, iter)).expect("in-flight update");
        f.staleness = f.staleness.max(stale);
        f.remaining -= 1;
        f.snapshots[shard] = Some(snapshot);
        Ok(true)
    }

    fn complete(&mut self, g: usize, iter: u64, end: f64) -> IterRecord {
        self.global_step += 1;
        let f = &self.inflight[&(g, iter)];
        IterRecord {
            iter,
            group: g,
            start: f.start,
            end,
            loss: f.loss,
            global_step: self.global_step,
            staleness: f.staleness,
            flops: self.flops,
        }
    }

    fn install_snapshots(&mut self, g: usize, iter: u64) {
        let f = self.inflight.remove(&(g, iter)).expect("in-flight update");
        for (shard, snap) in f.snapshots.into_iter().enumerate() {
            if let Some((version, tensors)) = snap {
                if version > self.groups[g].versions[shard] {
                    self.groups[g].versions[shard] = version;
                    install(self.net, &mut self.groups[g].params, shard, &tensors);
                }
            }
        }
    }

    fn run(&mut self) -> Result<()> {
        for g in 0..self.groups.len() {
            self.push(0.0, g, 0, Kind::Start);
        }
        while let Some(ev) = self.queue.pop() {
            if self.divergence.is_some() {
                break;
            }
            let (g, t) = (ev.group, ev.time);
            match ev.kind {
                Kind::Start => self.start(g, t)?,
                Kind::ComputeDone { iter } if self.plan.is_sync() => {
                    // Synchronous: every worker holds the reduced gradient and
                    // applies it locally; no parameter-server traffic.
                    for shard in 0..self.ps.len() {
                        if !self.apply(g, iter, shard, t)? {
                            break;
                        }
                    }
                    if self.divergence.is_some() {
                        break;
                    }
                    let mut rec = self.complete(g, iter, t);
                    rec.end += self.checkpoint_cost();
                    let end = rec.end;
                    self.records.push(rec);
                    self.install_snapshots(g, iter);
                    self.push(end, g, 0, Kind::Start);
                }
                Kind::ComputeDone { iter } => {
                    for shard in 0..self.ps.len() {
                        let dt = self.plan.network.message_time(self.shard_bytes[shard], &mut self.net_rng);
                        self.push(t + dt, g, shard, Kind::Arrive { iter });
                    }
                    if self.plan.overlap {
                        self.push(t, g, 0, Kind::Start);
                    }
                }
                Kind::Arrive { iter } => {
                    let shard = ev.layer;
                    if !self.apply(g, iter, shard, t)? {
                        break;
                    }
                    let back = t + self.plan.network.message_time(self.shard_bytes[shard], &mut self.net_rng);
                    let f = self.inflight.get_mut(&(g, iter)).expect("in-flight update");
                    f.last_return = f.last_return.max(back);
                    if f.remaining == 0 {
                        let ready = f.last_return;
                        let bcast = broadcast_time(
                            self.total_bytes,
                            self.plan.workers_per_group,
                            &self.plan.network,
                            &mut self.net_rng,
                        );
                        let mut rec = self.complete(g, iter, ready + bcast);
                        rec.end += self.checkpoint_cost();
                        let end = rec.end;
                        self.records.push(rec);
                        self.push(end, g, 0, Kind::Install { iter });
                    }
                }
                Kind::Install { iter } => {
                    self.install_snapshots(g, iter);
                    if !self.plan.overlap {
                        self.push(t, g, 0, Kind::Start);
                    }
                }
            }
        }
        if self.divergence.is_none() && (self.records.len() as u64) < self.iterations {
            return Err(Error::Internal(format!(
                "simulation stalled after {} of {} updates",
                self.records.len(),
                self.iterations
            )));
        }
        Ok(())
    }
}

fn simulate(
    plan: &ClusterPlan,
    model: &Network,
    math: Option<(&Dataset, &SolverConfig)>,
    batch_per_group: usize,
    iterations: u64,
    seed: u64,
) -> Result<RunOutcome> {
    plan.validate()?;
    if plan.ps_nodes != model.trainable_layer_count() {
        return Err(Error::Planning(format!(
            "plan has {} parameter servers but the model has {} trainable layers",
            plan.ps_nodes,
            model.trainable_layer_count()
        )));
    }
    if batch_per_group == 0 {
        return Err(Error::validation("batch_per_group must be positive"));
    }
    if iterations == 0 {
        return Err(Error::validation("iterations must be positive"));
    }
    let shards = model.shards.len();
    let ps = (0..shards)
        .map(|s| {
            let tensors = model.shard_tensors(&model.params, s);
            let solver = match math {
                Some((_, cfg)) => Some(SolverState::new(*cfg, &tensors)?),
                None => None,
            };
            Ok(ParamServer {
                tensors,
                version: 0,
                solver,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = (0..plan.num_groups)
        .map(|g| {
            Ok(Group {
                params: model.params.clone(),
                versions: vec![0; shards],
                next_iter: 0,
                sampler: match math {
                    Some((d, _)) => Some(BatchSampler::new(d, seed, g)?),
                    None => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let shard_bytes: Vec<usize> = (0..shards)
        .map(|s| WIRE_BYTES_PER_PARAM * model.shard_parameter_count(s))
        .collect();
    let mut sim = Sim {
        plan,
        net: model,
        batch: batch_per_group,
        iterations,
        flops: model_flops(model, batch_per_group),
        total_bytes: shard_bytes.iter().sum(),
        shard_bytes,
        ps,
        groups,
        inflight: BTreeMap::new(),
        queue: BinaryHeap::new(),
        seq: 0,
        started: 0,
        global_step: 0,
        records: Vec::with_capacity(iterations as usize),
        divergence: None,
        net_rng: stream(seed, &[NET_STREAM, plan.network.stream]),
        straggler_rng: stream(seed, &[STRAGGLER_STREAM]),
    };
    sim.run()?;
    let mut params = model.params.clone();
    for (s, server) in sim.ps.iter().enumerate() {
        install(model, &mut params, s, &server.tensors);
    }
    Ok(RunOutcome {
        log: RunLog {
            records: sim.records,
            divergence: sim.divergence,
            samples_per_update: batch_per_group,
            num_groups: plan.num_groups,
        },
        params,
    })
}

/// Trains `model` (starting from `model.params`) on the simulated cluster.
///
/// Each group reads its current model, computes the exact gradient of its
/// minibatch, all-reduces it, and its root sends each shard's update to that
/// shard's parameter server. Servers apply updates in arrival order and send
/// the fresh shard back; the root then broadcasts the model to its group.
/// With a single group the update is applied locally after the all-reduce.
pub fn run_training(
    plan: &ClusterPlan,
    model: &Network,
    dataset: &Dataset,
    solver: &SolverConfig,
    batch_per_group: usize,
    iterations: u64,
    seed: u64,
) -> Result<RunOutcome> {
    solver.validate()?;
    simulate(plan, model, Some((dataset, solver)), batch_per_group, iterations, seed)
}

/// Same event schedule as [`run_training`] without gradient math; losses are
/// absent and parameters never change.
pub fn run_timing(plan: &ClusterPlan, model: &Network, batch_per_group: usize, iterations: u64, seed: u64) -> Result<RunLog> {
    Ok(simulate(plan, model, None, batch_per_group, iterations, seed)?.log)
}
