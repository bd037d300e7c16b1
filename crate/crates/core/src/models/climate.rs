//! Semi-supervised detection network: a strided-conv encoder shared by four
//! 1x1 detection heads and a deconvolution decoder that reconstructs the input.
//!
//! Box coordinates are fractions of the image with the origin at the
//! bottom-left corner and `y` pointing up. Grid row 0 is the top row.

use serde::{Deserialize, Serialize};

use super::network::{LayerKind, Network, NetworkBuilder, Objective};
use crate::error::{Error, Result};
use crate::tensor::{softmax_xent_sum, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxTarget {
    pub class: usize,
    /// Bottom-left corner.
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxTarget {
    /// Grid cell `(row, col)` holding the box center.
    pub fn cell(&self, grid: usize) -> (usize, usize) {
        let g = grid as f64;
        let cx = self.x + 0.5 * self.w;
        let cy = self.y + 0.5 * self.h;
        let col = ((cx * g).floor().max(0.0) as usize).min(grid - 1);
        let row = (((1.0 - cy) * g).floor().max(0.0) as usize).min(grid - 1);
        (row, col)
    }

    /// Regression targets for the cell's head: corner offset in cell units
    /// from the cell's bottom-left corner, and square-rooted extents.
    fn encode(&self, grid: usize, row: usize, col: usize) -> [f64; 4] {
        let g = grid as f64;
        [
            self.x * g - col as f64,
            self.y * g - (grid - 1 - row) as f64,
            self.w.sqrt(),
            self.h.sqrt(),
        ]
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x)
            && (0.0..=1.0).contains(&self.y)
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + 1e-12
            && self.y + self.h <= 1.0 + 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub row: usize,
    pub col: usize,
    pub confidence: f64,
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClimateLossWeights {
    pub conf_obj: f64,
    pub conf_noobj: f64,
    pub class: f64,
    pub boxes: f64,
    pub recon: f64,
}

impl Default for ClimateLossWeights {
    fn default() -> Self {
        ClimateLossWeights {
            conf_obj: 1.0,
            conf_noobj: 0.5,
            class: 1.0,
            boxes: 5.0,
            recon: 1.0,
        }
    }
}

impl ClimateLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.conf_obj, self.conf_noobj, self.class, self.boxes, self.recon];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::validation(format!("loss weights must be non-negative: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::validation("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Raw head outputs over the coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    /// Confidence logits `[N, 1, G, G]`.
    pub conf: Tensor,
    /// Class logits `[N, K, G, G]`.
    pub class: Tensor,
    /// Corner offsets `[N, 2, G, G]`.
    pub xy: Tensor,
    /// Square-rooted extents `[N, 2, G, G]`.
    pub wh: Tensor,
}

impl DetectionOutput {
    /// Splits network outputs ordered `conf, class, xy, wh, reconstruction`.
    pub fn from_outputs(outputs: &[Tensor]) -> Result<Self> {
        if outputs.len() != 5 {
            return Err(Error::shape(format!("detection network has 5 outputs, got {}", outputs.len())));
        }
        let out = DetectionOutput {
            conf: outputs[0].clone(),
            class: outputs[1].clone(),
            xy: outputs[2].clone(),
            wh: outputs[3].clone(),
        };
        out.dims()?;
        Ok(out)
    }

    /// `(N, K, G)` after checking all heads agree.
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let [n, one, g, g2] = self.conf.dims4("confidence head")?;
        let [_, k, _, _] = self.class.dims4("class head")?;
        if one != 1 || g != g2 {
            return Err(Error::shape(format!("confidence head shape {:?}", self.conf.shape())));
        }
        for (t, c, what) in [(&self.class, k, "class"), (&self.xy, 2, "xy"), (&self.wh, 2, "wh")] {
            if t.shape() != [n, c, g, g] {
                return Err(Error::shape(format!("{what} head shape {:?}, expected [{n}, {c}, {g}, {g}]", t.shape())));
            }
        }
        Ok((n, k, g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrads {
    pub conf: Tensor,
    pub class: Tensor,
    pub xy: Tensor,
    pub wh: Tensor,
    pub reconstruction: Tensor,
}

impl DetectionGrads {
    pub(crate) fn into_outputs(self) -> Vec<Tensor> {
        vec![self.conf, self.class, self.xy, self.wh, self.reconstruction]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Assigns each target to its center cell, rejecting two boxes in one cell.
fn assign_cells(boxes: &[BoxTarget], grid: usize) -> Result<Vec<(usize, usize, BoxTarget)>> {
    let mut seen = vec![false; grid * grid];
    boxes
        .iter()
        .map(|b| {
            let (r, c) = b.cell(grid);
            if std::mem::replace(&mut seen[r * grid + c], true) {
                return Err(Error::validation(format!("two targets share grid cell ({r}, {c})")));
            }
            Ok((r, c, *b))
        })
        .collect()
}

/// Composite detection + reconstruction loss summed over the batch.
pub(crate) fn climate_loss_sum(
    preds: &DetectionOutput,
    targets: &[Vec<BoxTarget>],
    input: &Tensor,
    reconstruction: &Tensor,
    weights: &ClimateLossWeights,
) -> Result<(f64, DetectionGrads)> {
    let mut loss = 0.0;
    let grads = climate_loss_terms(preds, targets, input, reconstruction, weights, &mut |v| loss += v)?;
    Ok((loss, grads))
}

/// Hands every additive term of the summed loss to `add`, in a fixed order,
/// and returns the gradient of their sum.
pub(crate) fn climate_loss_terms(
    preds: &DetectionOutput,
    targets: &[Vec<BoxTarget>],
    input: &Tensor,
    reconstruction: &Tensor,
    weights: &ClimateLossWeights,
    add: &mut impl FnMut(f64),
) -> Result<DetectionGrads> {
    let (n, k, g) = preds.dims()?;
    if targets.len() != n {
        return Err(Error::shape(format!("{} target lists for a batch of {n}", targets.len())));
    }
    if input.shape() != reconstruction.shape() || input.shape()[0] != n {
        return Err(Error::shape(format!(
            "reconstruction {:?} does not match input {:?}",
            reconstruction.shape(),
            input.shape()
        )));
    }
    let cells = g * g;
    let mut grads = DetectionGrads {
        conf: Tensor::zeros(preds.conf.shape()),
        class: Tensor::zeros(preds.class.shape()),
        xy: Tensor::zeros(preds.xy.shape()),
        wh: Tensor::zeros(preds.wh.shape()),
        reconstruction: Tensor::zeros(reconstruction.shape()),
    };
    for (s, boxes) in targets.iter().enumerate() {
        let assigned = assign_cells(boxes, g)?;
        let mut has_obj = vec![false; cells];
        for &(r, c, _) in &assigned {
            has_obj[r * g + c] = true;
        }
        for (cell, &obj) in has_obj.iter().enumerate() {
            let idx = s * cells + cell;
            let c = sigmoid(preds.conf.data()[idx]);
            let dc = c * (1.0 - c);
            if obj {
                add(weights.conf_obj * (1.0 - c).powi(2));
                grads.conf.data_mut()[idx] = -2.0 * weights.conf_obj * (1.0 - c) * dc;
            } else {
                add(weights.conf_noobj * c * c);
                grads.conf.data_mut()[idx] = 2.0 * weights.conf_noobj * c * dc;
            }
        }
        for &(r, c, b) in &assigned {
            let cell = r * g + c;
            let logits: Vec<f64> = (0..k).map(|ch| preds.class.data()[(s * k + ch) * cells + cell]).collect();
            let (xent, dlogits) = softmax_xent_sum(&logits, &[b.class], k);
            add(weights.class * xent);
            for (ch, d) in dlogits.iter().enumerate() {
                grads.class.data_mut()[(s * k + ch) * cells + cell] = weights.class * d;
            }
            let t = b.encode(g, r, c);
            for (j, (head, grad)) in [(&preds.xy, &mut grads.xy), (&preds.wh, &mut grads.wh)]
                .into_iter()
                .enumerate()
            {
                for ch in 0..2 {
                    let idx = (s * 2 + ch) * cells + cell;
                    let diff = head.data()[idx] - t[2 * j + ch];
                    add(weights.boxes * diff * diff);
                    grad.data_mut()[idx] = 2.0 * weights.boxes * diff;
                }
            }
        }
    }
    let per = input.len() / n;
    let scale = weights.recon / per as f64;
    for ((gr, &r), &x) in grads
        .reconstruction
        .data_mut()
        .iter_mut()
        .zip(reconstruction.data())
        .zip(input.data())
    {
        let d = r - x;
        add(scale * d * d);
        *gr = 2.0 * scale * d;
    }
    Ok(grads)
}

/// Batch-mean composite loss and its gradient with respect to every head
/// output and the reconstruction.
pub fn climate_loss(
    preds: &DetectionOutput,
    targets: &[Vec<BoxTarget>],
    input: &Tensor,
    reconstruction: &Tensor,
    weights: &ClimateLossWeights,
) -> Result<(f64, DetectionGrads)> {
    let (loss, mut grads) = climate_loss_sum(preds, targets, input, reconstruction, weights)?;
    let inv = 1.0 / targets.len() as f64;
    for t in [
        &mut grads.conf,
        &mut grads.class,
        &mut grads.xy,
        &mut grads.wh,
        &mut grads.reconstruction,
    ] {
        t.scale(inv);
    }
    Ok((loss * inv, grads))
}

/// One candidate per grid cell; keeps cells whose sigmoid confidence exceeds
/// `threshold`. Returns one list per sample.
pub fn infer_boxes(preds: &DetectionOutput, threshold: f64) -> Result<Vec<Vec<BoxPrediction>>> {
    let (n, k, g) = preds.dims()?;
    let cells = g * g;
    let gf = g as f64;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut found = Vec::new();
        for cell in 0..cells {
            let confidence = sigmoid(preds.conf.data()[s * cells + cell]);
            if confidence <= threshold {
                continue;
            }
            let (row, col) = (cell / g, cell % g);
            let class = (0..k)
                .max_by(|&a, &b| {
                    let za = preds.class.data()[(s * k + a) * cells + cell];
                    let zb = preds.class.data()[(s * k + b) * cells + cell];
                    za.total_cmp(&zb).then(b.cmp(&a))
                })
                .unwrap_or(0);
            let at = |t: &Tensor, ch: usize| t.data()[(s * 2 + ch) * cells + cell];
            let x = ((col as f64 + at(&preds.xy, 0)) / gf).clamp(0.0, 1.0);
            let y = (((g - 1 - row) as f64 + at(&preds.xy, 1)) / gf).clamp(0.0, 1.0);
            let w = at(&preds.wh, 0).powi(2).max(1e-6);
            let h = at(&preds.wh, 1).powi(2).max(1e-6);
            found.push(BoxPrediction {
                row,
                col,
                confidence,
                class,
                x,
                y,
                w,
                h,
            });
        }
        out.push(found);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClimateConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid: usize,
    pub classes: usize,
    pub encoder_convs: usize,
    pub decoder_deconvs: usize,
    pub filters: usize,
    #[serde(default)]
    pub loss_weights: ClimateLossWeights,
}

impl Default for ClimateConfig {
    fn default() -> Self {
        ClimateConfig {
            channels: 8,
            height: 64,
            width: 64,
            grid: 8,
            classes: 2,
            encoder_convs: 3,
            decoder_deconvs: 3,
            filters: 16,
            loss_weights: ClimateLossWeights::default(),
        }
    }
}

/// Encoder of `encoder_convs` 3x3 convs (the first `log2(H / grid)` strided),
/// four 1x1 heads, and a decoder of `decoder_deconvs` transposed convs ending
/// in a stride-2 upsampling chain back to the input resolution.
///
/// The heads share the parameter-server shard of the last encoder conv, so
/// `trainable_layer_count == encoder_convs + decoder_deconvs`.
pub fn build_climate_mini(cfg: &ClimateConfig) -> Result<Network> {
    cfg.loss_weights.validate()?;
    let ClimateConfig {
        channels,
        height,
        width,
        grid,
        classes,
        encoder_convs,
        decoder_deconvs,
        filters,
        ..
    } = *cfg;
    if channels == 0 || filters == 0 || classes == 0 || grid == 0 {
        return Err(Error::shape(format!("climate network extents must be positive: {cfg:?}")));
    }
    if height != width || height % grid != 0 || !(height / grid).is_power_of_two() {
        return Err(Error::shape(format!(
            "input {height}x{width} is not a power-of-two multiple of the {grid}x{grid} grid"
        )));
    }
    let down = (height / grid).trailing_zeros() as usize;
    if encoder_convs < down.max(1) || decoder_deconvs < down.max(1) {
        return Err(Error::shape(format!(
            "{height}x{width} -> {grid}x{grid} needs at least {down} strided encoder convs and decoder deconvs"
        )));
    }
    let mut b = NetworkBuilder::new([channels, height, width]);
    let mut c = channels;
    for i in 0..encoder_convs {
        let stride = if i < down { 2 } else { 1 };
        b.push(&format!("enc{}", i + 1), LayerKind::Conv(ConvSpec::square(c, filters, 3, stride, 1)))?;
        b.push(&format!("enc{}_relu", i + 1), LayerKind::Relu)?;
        c = filters;
    }
    let head_shard = b.shard_count() - 1;
    for (name, out) in [("head_conf", 1), ("head_class", classes), ("head_xy", 2), ("head_wh", 2)] {
        b.branch(&[(name, LayerKind::Conv(ConvSpec::square(filters, out, 1, 1, 0)))], Some(head_shard))?;
    }
    let names: Vec<(String, String)> = (1..=decoder_deconvs)
        .map(|i| (format!("dec{i}"), format!("dec{i}_relu")))
        .collect();
    let mut decoder = Vec::new();
    for (i, (name, relu)) in names.iter().enumerate() {
        let last = i + 1 == decoder_deconvs;
        let out = if last { channels } else { filters };
        // A deconv's spec is that of the conv it transposes: out_channels is
        // the deconv's input.
        let spec = if i + down < decoder_deconvs {
            ConvSpec::square(out, filters, 3, 1, 1)
        } else {
            ConvSpec::square(out, filters, 4, 2, 1)
        };
        decoder.push((name.as_str(), LayerKind::Deconv(spec)));
        if !last {
            decoder.push((relu.as_str(), LayerKind::Relu));
        }
    }
    b.branch(&decoder, None)?;
    Ok(b.finish(Objective::Detection {
        grid,
        classes,
        weights: cfg.loss_weights,
    }))
}
