use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::climate::{self, BoxTarget, ClimateLossWeights, DetectionOutput};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, dense_backward, dense_forward,
    pool_backward, pool_forward, relu_backward, relu_forward, ConvSpec, PoolKind, PoolState, Tensor,
};

/// Samples per unit of parallel work. Fixed so that gradient sums are
/// reduced in the same order regardless of host thread count.
const CHUNK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv(ConvSpec),
    /// Transposed convolution; the spec is that of the forward conv it inverts.
    Deconv(ConvSpec),
    Relu,
    Pool(PoolKind),
    Dense { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Deconv(_) | LayerKind::Dense { .. })
    }

    /// Output shape `[C, H, W]` (dense layers produce `[M, 1, 1]`).
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match *self {
            LayerKind::Conv(spec) => {
                if c != spec.in_channels {
                    return Err(Error::shape(format!("conv expects {} channels, got {c}", spec.in_channels)));
                }
                let (oh, ow) = spec.output_hw(h, w)?;
                Ok([spec.out_channels, oh, ow])
            }
            LayerKind::Deconv(spec) => {
                if c != spec.out_channels {
                    return Err(Error::shape(format!(
                        "deconv expects {} channels, got {c}",
                        spec.out_channels
                    )));
                }
                let (oh, ow) = spec.deconv_output_hw(h, w)?;
                Ok([spec.in_channels, oh, ow])
            }
            LayerKind::Relu => Ok(input),
            LayerKind::Pool(PoolKind::Max2x2Stride2) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(format!("max pool needs even extents, got {h}x{w}")));
                }
                Ok([c, h / 2, w / 2])
            }
            LayerKind::Pool(PoolKind::GlobalAvg) => Ok([c, 1, 1]),
            LayerKind::Dense { inputs, outputs } => {
                if c * h * w != inputs {
                    return Err(Error::shape(format!("dense expects {inputs} features, got {}", c * h * w)));
                }
                Ok([outputs, 1, 1])
            }
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv(spec) => Some((spec.weight_shape().to_vec(), vec![spec.out_channels])),
            LayerKind::Deconv(spec) => Some((spec.weight_shape().to_vec(), vec![spec.in_channels])),
            LayerKind::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv(s) => s.in_channels * s.kernel_h * s.kernel_w,
            // Each output pixel of a strided transposed conv sees about
            // kernel/stride taps per axis.
            LayerKind::Deconv(s) => (s.out_channels * s.kernel_h * s.kernel_w / (s.stride * s.stride)).max(1),
            LayerKind::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Index of this layer's weight tensor in the flat parameter list; the
    /// bias follows it.
    pub param_offset: Option<usize>,
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
}

/// A group of parameter tensors owned by one parameter server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub name: String,
    pub tensors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    SoftmaxXent { classes: usize },
    Detection {
        grid: usize,
        classes: usize,
        weights: ClimateLossWeights,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Boxes(Vec<Vec<BoxTarget>>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Boxes(b) => b.len(),
        }
    }

    fn slice(&self, start: usize, count: usize) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(l[start..start + count].to_vec()),
            Targets::Boxes(b) => Targets::Boxes(b[start..start + count].to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slice(&self, start: usize, count: usize) -> Result<Batch> {
        Ok(Batch {
            input: self.input.batch_slice(start, count)?,
            targets: self.targets.slice(start, count),
        })
    }
}

/// Layers in execution order: a shared trunk followed by optional branches
/// that all read the trunk output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: [usize; 3],
    pub trunk: Vec<Layer>,
    pub branches: Vec<Vec<Layer>>,
    pub params: Vec<Tensor>,
    pub shards: Vec<Shard>,
    pub objective: Objective,
}

enum Saved {
    Input(Tensor),
    Pool(PoolState),
}

/// Activations of one forward pass, keyed by layer position (branch, or
/// `None` for the trunk, and index).
#[derive(Default)]
pub(crate) struct ProbeCache {
    trunk_inputs: Vec<Tensor>,
    branch_inputs: Vec<Vec<Tensor>>,
    outputs: Vec<Tensor>,
    offsets: Vec<(usize, (Option<usize>, usize))>,
    patterns: std::collections::BTreeMap<(Option<usize>, usize), u64>,
    /// Objective terms at the cached point.
    pub(crate) terms: Vec<f64>,
}

impl ProbeCache {
    fn position(&self, offset: usize) -> Result<(Option<usize>, usize)> {
        self.offsets
            .iter()
            .find(|(o, _)| *o == offset)
            .map(|&(_, key)| key)
            .ok_or_else(|| Error::Internal(format!("no layer owns parameter tensor {offset}")))
    }
}

/// Hash of the ReLU mask or max-pool selection a layer made, if it has one.
fn saved_pattern(layer: &Layer, saved: &Saved) -> Option<u64> {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    match (layer.kind, saved) {
        (LayerKind::Relu, Saved::Input(x)) => x.data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
        (_, Saved::Pool(PoolState::Max { argmax, .. })) => argmax.hash(&mut h),
        _ => return None,
    }
    Some(h.finish())
}

struct Tape {
    trunk: Vec<Saved>,
    branches: Vec<Vec<Saved>>,
}

/// Incremental builder that checks shapes compose as layers are appended.
pub(crate) struct NetworkBuilder {
    input_shape: [usize; 3],
    trunk: Vec<Layer>,
    branches: Vec<Vec<Layer>>,
    param_shapes: Vec<Vec<usize>>,
    shards: Vec<Shard>,
}

impl NetworkBuilder {
    pub(crate) fn new(input_shape: [usize; 3]) -> Self {
        NetworkBuilder {
            input_shape,
            trunk: Vec::new(),
            branches: Vec::new(),
            param_shapes: Vec::new(),
            shards: Vec::new(),
        }
    }

    fn make_layer(&mut self, name: &str, kind: LayerKind, input_shape: [usize; 3]) -> Result<Layer> {
        let output_shape = kind
            .output_shape(input_shape)
            .map_err(|e| Error::shape(format!("layer {name}: {e}")))?;
        let param_offset = kind.param_shapes().map(|(w, b)| {
            let offset = self.param_shapes.len();
            self.param_shapes.push(w);
            self.param_shapes.push(b);
            offset
        });
        Ok(Layer {
            name: name.to_string(),
            kind,
            param_offset,
            input_shape,
            output_shape,
        })
    }

    pub(crate) fn trunk_shape(&self) -> [usize; 3] {
        self.trunk.last().map_or(self.input_shape, |l| l.output_shape)
    }

    /// Appends to the trunk; trainable layers get their own shard.
    pub(crate) fn push(&mut self, name: &str, kind: LayerKind) -> Result<&mut Self> {
        let layer = self.make_layer(name, kind, self.trunk_shape())?;
        if let Some(off) = layer.param_offset {
            self.shards.push(Shard {
                name: name.to_string(),
                tensors: vec![off, off + 1],
            });
        }
        self.trunk.push(layer);
        Ok(self)
    }

    /// Adds a branch over the trunk output. Trainable layers get their own
    /// shard unless `join_shard` names an existing shard to extend.
    pub(crate) fn branch(&mut self, layers: &[(&str, LayerKind)], join_shard: Option<usize>) -> Result<&mut Self> {
        let mut shape = self.trunk_shape();
        let mut branch = Vec::new();
        for (name, kind) in layers {
            let layer = self.make_layer(name, *kind, shape)?;
            shape = layer.output_shape;
            if let Some(off) = layer.param_offset {
                match join_shard {
                    Some(idx) => self.shards[idx].tensors.extend([off, off + 1]),
                    None => self.shards.push(Shard {
                        name: name.to_string(),
                        tensors: vec![off, off + 1],
                    }),
                }
            }
            branch.push(layer);
        }
        self.branches.push(branch);
        Ok(self)
    }

    pub(crate) fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub(crate) fn finish(self, objective: Objective) -> Network {
        Network {
            input_shape: self.input_shape,
            trunk: self.trunk,
            branches: self.branches,
            params: self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            shards: self.shards,
            objective,
        }
    }
}

fn layer_forward(layer: &Layer, params: &[Tensor], x: Tensor) -> Result<(Tensor, Saved)> {
    let p = |i: usize| &params[layer.param_offset.expect("trainable layer has params") + i];
    Ok(match layer.kind {
        LayerKind::Conv(spec) => (conv2d_forward(&x, p(0), p(1), &spec)?, Saved::Input(x)),
        LayerKind::Deconv(spec) => {
            let mut y = deconv2d_forward(&x, p(0), &spec)?;
            add_channel_bias(&mut y, p(1));
            (y, Saved::Input(x))
        }
        LayerKind::Relu => (relu_forward(&x), Saved::Input(x)),
        LayerKind::Pool(kind) => {
            let (y, state) = pool_forward(&x, kind)?;
            (y, Saved::Pool(state))
        }
        LayerKind::Dense { .. } => {
            let n = x.shape()[0];
            let y = dense_forward(&x, p(0), p(1))?;
            let m = y.shape()[1];
            (y.reshape(&[n, m, 1, 1])?, Saved::Input(x))
        }
    })
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let [_, c, h, w] = y.dims4("biased output").expect("rank-4 output");
    for (i, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
        let b = bias.data()[i % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let [_, c, h, w] = g.dims4("grad").expect("rank-4 grad");
    let mut out = Tensor::zeros(&[c]);
    for (i, plane) in g.data().chunks(h * w).enumerate() {
        out.data_mut()[i % c] += plane.iter().sum::<f64>();
    }
    out
}

/// Returns the input gradient and accumulates parameter gradients.
fn layer_backward(layer: &Layer, params: &[Tensor], saved: &Saved, grad: Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
    let off = layer.param_offset.unwrap_or(0);
    match (layer.kind, saved) {
        (LayerKind::Conv(spec), Saved::Input(x)) => {
            let (gi, gw, gb) = conv2d_backward(x, &params[off], &grad, &spec)?;
            grads[off].add_assign(&gw)?;
            grads[off + 1].add_assign(&gb)?;
            Ok(gi)
        }
        (LayerKind::Deconv(spec), Saved::Input(x)) => {
            let (gi, gw) = deconv2d_backward(x, &params[off], &grad, &spec)?;
            grads[off].add_assign(&gw)?;
            grads[off + 1].add_assign(&channel_sums(&grad))?;
            Ok(gi)
        }
        (LayerKind::Relu, Saved::Input(x)) => relu_backward(x, &grad),
        (LayerKind::Pool(kind), Saved::Pool(state)) => pool_backward(&grad, state, kind),
        (LayerKind::Dense { outputs, .. }, Saved::Input(x)) => {
            let n = grad.shape()[0];
            let (gi, gw, gb) = dense_backward(x, &params[off], &grad.reshape(&[n, outputs])?)?;
            grads[off].add_assign(&gw)?;
            grads[off + 1].add_assign(&gb)?;
            Ok(gi)
        }
        _ => Err(Error::Internal(format!("layer {} has mismatched saved state", layer.name))),
    }
}

impl Network {
    pub fn trainable_layer_count(&self) -> usize {
        self.shards.len()
    }

    pub fn param_layer_count(&self) -> usize {
        self.layers().filter(|l| l.param_offset.is_some()).count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn shard_parameter_count(&self, shard: usize) -> usize {
        self.shards[shard].tensors.iter().map(|&t| self.params[t].len()).sum()
    }

    /// Every layer, trunk first, then each branch in order.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(self.branches.iter().flatten())
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Layer> = self.layers().cloned().collect();
        for layer in layers {
            if let Some(off) = layer.param_offset {
                let std = (2.0 / layer.kind.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in self.params[off].data_mut() {
                    *v = normal.sample(&mut rng);
                }
                self.params[off + 1].data_mut().fill(0.0);
            }
        }
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("parameter list does not match the network layout"));
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [_, c, h, w] = input.dims4("network input")?;
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(format!(
                "network expects input [N, {}, {}, {}], got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                input.shape()
            )));
        }
        Ok(())
    }

    fn forward_tape(&self, params: &[Tensor], input: &Tensor) -> Result<(Vec<Tensor>, Tape)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let (y, saved) = layer_forward(layer, params, x)?;
            trunk.push(saved);
            x = y;
        }
        if self.branches.is_empty() {
            return Ok((vec![x], Tape { trunk, branches: Vec::new() }));
        }
        let mut outputs = Vec::with_capacity(self.branches.len());
        let mut branches = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut b = x.clone();
            let mut tape = Vec::with_capacity(branch.len());
            for layer in branch {
                let (y, saved) = layer_forward(layer, params, b)?;
                tape.push(saved);
                b = y;
            }
            outputs.push(b);
            branches.push(tape);
        }
        Ok((outputs, Tape { trunk, branches }))
    }

    /// Raw network outputs: the trunk output, or one tensor per branch.
    pub fn forward(&self, params: &[Tensor], input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        Ok(self.forward_tape(params, input)?.0)
    }

    fn backward_tape(&self, params: &[Tensor], tape: Tape, output_grads: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut trunk_grad: Option<Tensor> = None;
        if self.branches.is_empty() {
            trunk_grad = output_grads.into_iter().next();
        } else {
            for ((branch, saved), g) in self.branches.iter().zip(tape.branches).zip(output_grads) {
                let mut g = g;
                for (layer, s) in branch.iter().zip(&saved).rev() {
                    g = layer_backward(layer, params, s, g, &mut grads)?;
                }
                match trunk_grad.as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => trunk_grad = Some(g),
                }
            }
        }
        let mut g = trunk_grad.ok_or_else(|| Error::Internal("no output gradient".into()))?;
        for (layer, s) in self.trunk.iter().zip(&tape.trunk).rev() {
            g = layer_backward(layer, params, s, g, &mut grads)?;
        }
        Ok(grads)
    }

    /// Summed (not averaged) loss over `batch` and the gradient of that sum.
    fn loss_sum_and_grad(&self, params: &[Tensor], batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        let (outputs, tape) = self.forward_tape(params, &batch.input)?;
        let (loss, output_grads) = self.objective_sum(&outputs, batch)?;
        Ok((loss, self.backward_tape(params, tape, output_grads)?))
    }

    fn objective_sum(&self, outputs: &[Tensor], batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        match (&self.objective, &batch.targets) {
            (Objective::SoftmaxXent { classes }, Targets::Labels(labels)) => {
                let n = batch.len();
                let logits = outputs[0].clone().reshape(&[n, *classes])?;
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
                }
                let (loss, grad) = crate::tensor::softmax_xent_sum_tensor(&logits, labels)?;
                Ok((loss, vec![grad.reshape(outputs[0].shape())?]))
            }
            (Objective::Detection { weights, .. }, Targets::Boxes(boxes)) => {
                let preds = DetectionOutput::from_outputs(outputs)?;
                let (loss, grads) = climate::climate_loss_sum(&preds, boxes, &batch.input, &outputs[4], weights)?;
                Ok((loss, grads.into_outputs()))
            }
            _ => Err(Error::validation("targets do not match the network objective")),
        }
    }

    /// Mean loss over the batch and its exact gradient.
    ///
    /// Work is split into fixed chunks that may run on parallel threads; the
    /// chunk sums are reduced in chunk order, so the result does not depend
    /// on the thread count.
    pub fn loss_and_grad(&self, params: &[Tensor], batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        self.check_params(params)?;
        let n = batch.len();
        if n == 0 || batch.targets.len() != n {
            return Err(Error::shape(format!(
                "batch has {n} inputs and {} targets",
                batch.targets.len()
            )));
        }
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<Result<(f64, Vec<Tensor>)>> = starts
            .par_iter()
            .map(|&s| {
                let chunk = batch.slice(s, CHUNK.min(n - s))?;
                self.loss_sum_and_grad(params, &chunk)
            })
            .collect();
        let mut total = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for part in parts {
            let (loss, g) = part?;
            total += loss;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = 1.0 / n as f64;
        grads.iter_mut().for_each(|g| g.scale(inv));
        Ok((total * inv, grads))
    }

    /// Additive terms of the summed objective, in a fixed order.
    fn objective_terms(&self, outputs: &[Tensor], batch: &Batch) -> Result<Vec<f64>> {
        let mut terms = Vec::new();
        match (&self.objective, &batch.targets) {
            (Objective::SoftmaxXent { classes }, Targets::Labels(labels)) => {
                for (row, &label) in outputs[0].data().chunks(*classes).zip(labels) {
                    if label >= *classes {
                        return Err(Error::validation(format!("label {label} out of range for {classes} classes")));
                    }
                    terms.push(crate::tensor::softmax_xent_sum(row, &[label], *classes).0);
                }
            }
            (Objective::Detection { weights, .. }, Targets::Boxes(boxes)) => {
                let preds = DetectionOutput::from_outputs(outputs)?;
                climate::climate_loss_terms(&preds, boxes, &batch.input, &outputs[4], weights, &mut |v| terms.push(v))?;
            }
            _ => return Err(Error::validation("targets do not match the network objective")),
        }
        Ok(terms)
    }

    /// Forward pass that keeps every layer input, for repeated evaluation
    /// under single-parameter perturbations.
    pub(crate) fn probe_cache(&self, params: &[Tensor], batch: &Batch) -> Result<ProbeCache> {
        self.check_params(params)?;
        self.check_input(&batch.input)?;
        let mut cache = ProbeCache::default();
        let outputs = self.forward_from(params, batch.input.clone(), (None, 0), &mut cache, true)?;
        cache.terms = self.objective_terms(&outputs, batch)?;
        cache.outputs = outputs;
        Ok(cache)
    }

    /// Loss terms with `params` in place of the cached parameters, which may
    /// differ only in the trainable layer whose tensors start at `offset`.
    /// `None` when a ReLU mask or max-pool selection changed.
    pub(crate) fn probe_terms(
        &self,
        params: &[Tensor],
        batch: &Batch,
        cache: &ProbeCache,
        offset: usize,
    ) -> Result<Option<Vec<f64>>> {
        let at = cache.position(offset)?;
        let mut scratch = ProbeCache {
            patterns: cache.patterns.clone(),
            ..ProbeCache::default()
        };
        let x = match at {
            (None, i) => cache.trunk_inputs[i].clone(),
            (Some(b), i) => cache.branch_inputs[b][i].clone(),
        };
        let fresh = self.forward_from(params, x, at, &mut scratch, false)?;
        if scratch.patterns != cache.patterns {
            return Ok(None);
        }
        let outputs = match at {
            (None, _) => fresh,
            (Some(b), _) => {
                let mut outputs = cache.outputs.clone();
                outputs[b] = fresh.into_iter().next().expect("one branch output");
                outputs
            }
        };
        Ok(Some(self.objective_terms(&outputs, batch)?))
    }

    /// Runs the network from layer `start` (trunk when the branch is `None`)
    /// on `x`, that layer's input. Every branch runs when starting in the
    /// trunk; otherwise only the starting branch, whose output is returned alone.
    fn forward_from(
        &self,
        params: &[Tensor],
        mut x: Tensor,
        start: (Option<usize>, usize),
        cache: &mut ProbeCache,
        keep_inputs: bool,
    ) -> Result<Vec<Tensor>> {
        if keep_inputs {
            cache.branch_inputs = vec![Vec::new(); self.branches.len()];
        }
        let mut run = |layer: &Layer, key: (Option<usize>, usize), x: Tensor| -> Result<Tensor> {
            if keep_inputs {
                match key.0 {
                    None => cache.trunk_inputs.push(x.clone()),
                    Some(b) => cache.branch_inputs[b].push(x.clone()),
                }
                if let Some(off) = layer.param_offset {
                    cache.offsets.push((off, key));
                }
            }
            let (y, saved) = layer_forward(layer, params, x)?;
            if let Some(p) = saved_pattern(layer, &saved) {
                cache.patterns.insert(key, p);
            }
            Ok(y)
        };
        let (branch_start, branches): (usize, Vec<usize>) = match start {
            (None, i) => {
                for (j, layer) in self.trunk.iter().enumerate().skip(i) {
                    x = run(layer, (None, j), x)?;
                }
                (0, (0..self.branches.len()).collect())
            }
            (Some(b), i) => (i, vec![b]),
        };
        if self.branches.is_empty() {
            return Ok(vec![x]);
        }
        let mut outputs = Vec::with_capacity(branches.len());
        for b in branches {
            let mut y = x.clone();
            for (j, layer) in self.branches[b].iter().enumerate().skip(branch_start) {
                y = run(layer, (Some(b), j), y)?;
            }
            outputs.push(y);
        }
        Ok(outputs)
    }

    /// Mean loss only (forward pass).
    pub fn loss(&self, params: &[Tensor], batch: &Batch) -> Result<f64> {
        self.check_params(params)?;
        let outputs = self.forward_tape(params, &batch.input)?.0;
        Ok(self.objective_sum(&outputs, batch)?.0 / batch.len() as f64)
    }

    /// Copies the tensors of one shard out of a full parameter list.
    pub fn shard_tensors(&self, params: &[Tensor], shard: usize) -> Vec<Tensor> {
        self.shards[shard].tensors.iter().map(|&t| params[t].clone()).collect()
    }
}
