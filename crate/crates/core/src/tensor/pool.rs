use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max2x2Stride2,
    GlobalAvg,
}

/// What the backward pass needs from the forward call.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolState {
    /// Flat input index of the selected cell for every output element.
    Max { input_shape: Vec<usize>, argmax: Vec<usize> },
    GlobalAvg { input_shape: Vec<usize> },
}

pub fn pool_forward(input: &Tensor, kind: PoolKind) -> Result<(Tensor, PoolState)> {
    let [n, c, h, w] = input.dims4("pool input")?;
    match kind {
        PoolKind::Max2x2Stride2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("max 2x2 pooling needs even extents, got {h}x{w}")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Tensor::zeros(&[n, c, oh, ow]);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            let x = input.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out.data_mut()[(plane * oh + oy) * ow + ox] = x[best];
                        argmax.push(best);
                    }
                }
            }
            Ok((
                out,
                PoolState::Max {
                    input_shape: input.shape().to_vec(),
                    argmax,
                },
            ))
        }
        PoolKind::GlobalAvg => {
            let area = (h * w) as f64;
            let data = input
                .data()
                .chunks(h * w)
                .map(|p| p.iter().sum::<f64>() / area)
                .collect();
            Ok((
                Tensor::from_vec(&[n, c, 1, 1], data)?,
                PoolState::GlobalAvg {
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
    }
}

pub fn pool_backward(grad_output: &Tensor, state: &PoolState, kind: PoolKind) -> Result<Tensor> {
    match (kind, state) {
        (PoolKind::Max2x2Stride2, PoolState::Max { input_shape, argmax }) => {
            if grad_output.len() != argmax.len() {
                return Err(Error::shape(format!(
                    "max pool grad has {} elements, forward produced {}",
                    grad_output.len(),
                    argmax.len()
                )));
            }
            let mut grad = Tensor::zeros(input_shape);
            for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
                grad.data_mut()[idx] += g;
            }
            Ok(grad)
        }
        (PoolKind::GlobalAvg, PoolState::GlobalAvg { input_shape }) => {
            let [n, c, h, w] = match input_shape[..] {
                [n, c, h, w] => [n, c, h, w],
                _ => return Err(Error::shape("global pool state is not rank 4")),
            };
            if grad_output.shape() != [n, c, 1, 1] {
                return Err(Error::shape(format!(
                    "global pool grad shape {:?} does not match [{n}, {c}, 1, 1]",
                    grad_output.shape()
                )));
            }
            let scale = 1.0 / (h * w) as f64;
            let data = grad_output
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * scale, h * w))
                .collect();
            Tensor::from_vec(input_shape, data)
        }
        _ => Err(Error::shape(format!("pool state does not match kind {kind:?}"))),
    }
}
