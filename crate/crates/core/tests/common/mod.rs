#![allow(dead_code)]

use hybridtrain::models::{Layer, LayerKind};
use hybridtrain::tensor::ConvSpec;
use hybridtrain::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative error with a small floor so vanishing components compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between `analytic` and central differences of the
/// scalar `f` around `x`.
pub fn fd_max_rel(x: &Tensor, analytic: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + eps;
        let up = f(&probe);
        probe.data_mut()[i] = v - eps;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Counts the multiply-adds a naive loop nest executes, padded taps included.
fn conv_counter(s: &ConvSpec, n: usize, oh: usize, ow: usize) -> u64 {
    let mut count = 0u64;
    for _ in 0..n {
        for _ in 0..s.out_channels {
            for _ in 0..oh * ow {
                for _ in 0..s.in_channels {
                    for _ in 0..s.kernel_h * s.kernel_w {
                        count += 2;
                    }
                }
            }
        }
    }
    count
}

/// Scatter loop of a transposed convolution over its input grid.
fn deconv_counter(s: &ConvSpec, n: usize, ih: usize, iw: usize) -> u64 {
    let mut count = 0u64;
    for _ in 0..n * ih * iw {
        for _ in 0..s.out_channels {
            for _ in 0..s.in_channels {
                for _ in 0..s.kernel_h * s.kernel_w {
                    count += 2;
                }
            }
        }
    }
    count
}

pub fn counted(layer: &Layer, n: usize) -> (u64, u64) {
    let [_, ih, iw] = layer.input_shape;
    let [oc, oh, ow] = layer.output_shape;
    match layer.kind {
        // Backward runs the data and the weight pass, each a loop of the
        // forward's size.
        LayerKind::Conv(s) => {
            let f = conv_counter(&s, n, oh, ow);
            (f, conv_counter(&s, n, oh, ow) + conv_counter(&s, n, oh, ow))
        }
        LayerKind::Deconv(s) => {
            let f = deconv_counter(&s, n, ih, iw);
            (f, deconv_counter(&s, n, ih, iw) + deconv_counter(&s, n, ih, iw))
        }
        LayerKind::Dense { inputs, outputs } => {
            let mut f = 0;
            for _ in 0..n * inputs * outputs {
                f += 2;
            }
            (f, 2 * f)
        }
        LayerKind::Relu | LayerKind::Pool(_) => {
            let mut f = 0;
            for _ in 0..n * oc * oh * ow {
                f += 1;
            }
            (f, f)
        }
    }
}

