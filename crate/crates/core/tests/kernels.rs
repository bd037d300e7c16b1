mod common;

use common::{dot, fd_max_rel, randn, rng};
use hybridtrain::tensor::*;
use hybridtrain::Tensor;
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SEEDS: u64 = 20;

fn random_spec(r: &mut impl Rng) -> (ConvSpec, usize, usize, usize) {
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..k);
    let spec = ConvSpec::square(r.random_range(1..=3), r.random_range(1..=3), k, stride, pad);
    (spec, r.random_range(1..=2), r.random_range(k..k + 5), r.random_range(k..k + 5))
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (spec, n, h, w) = random_spec(&mut r);
        let x = randn(&mut r, &[n, spec.in_channels, h, w]);
        let wt = randn(&mut r, &spec.weight_shape());
        let b = randn(&mut r, &[spec.out_channels]);
        let out = conv2d_forward(&x, &wt, &b, &spec).unwrap();
        let cot = randn(&mut r, out.shape());
        let (gx, gw, gb) = conv2d_backward(&x, &wt, &cot, &spec).unwrap();
        let loss = |x: &Tensor, wt: &Tensor, b: &Tensor| dot(&conv2d_forward(x, wt, b, &spec).unwrap(), &cot);
        let ex = fd_max_rel(&x, &gx, EPS, |v| loss(v, &wt, &b));
        let ew = fd_max_rel(&wt, &gw, EPS, |v| loss(&x, v, &b));
        let eb = fd_max_rel(&b, &gb, EPS, |v| loss(&x, &wt, v));
        assert!(ex.max(ew).max(eb) < TOL, "seed {seed} {spec:?}: {ex} {ew} {eb}");
    }
}

#[test]
fn paper_example_conv_gradients() {
    let mut r = rng(99);
    let spec = ConvSpec::square(2, 3, 3, 1, 1);
    let x = randn(&mut r, &[1, 2, 5, 5]);
    let wt = randn(&mut r, &[3, 2, 3, 3]);
    let b = Tensor::zeros(&[3]);
    let cot = randn(&mut r, &[1, 3, 5, 5]);
    let (gx, gw, _) = conv2d_backward(&x, &wt, &cot, &spec).unwrap();
    let loss = |x: &Tensor, wt: &Tensor| dot(&conv2d_forward(x, wt, &b, &spec).unwrap(), &cot);
    assert!(fd_max_rel(&x, &gx, EPS, |v| loss(v, &wt)) < TOL);
    assert!(fd_max_rel(&wt, &gw, EPS, |v| loss(&x, v)) < TOL);
}

fn deconv_input_hw(spec: &ConvSpec, r: &mut impl Rng) -> (usize, usize) {
    // Pick a conv input extent, the deconv input is the conv output extent.
    loop {
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        if let Ok((oh, ow)) = spec.output_hw(h, w) {
            if spec.deconv_output_hw(oh, ow).is_ok() {
                return (oh, ow);
            }
        }
    }
}

#[test]
fn deconv_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(1000 + seed);
        let (spec, n, _, _) = random_spec(&mut r);
        let (h, w) = deconv_input_hw(&spec, &mut r);
        let x = randn(&mut r, &[n, spec.out_channels, h, w]);
        let wt = randn(&mut r, &spec.weight_shape());
        let out = deconv2d_forward(&x, &wt, &spec).unwrap();
        let cot = randn(&mut r, out.shape());
        let (gx, gw) = deconv2d_backward(&x, &wt, &cot, &spec).unwrap();
        let loss = |x: &Tensor, wt: &Tensor| dot(&deconv2d_forward(x, wt, &spec).unwrap(), &cot);
        let ex = fd_max_rel(&x, &gx, EPS, |v| loss(v, &wt));
        let ew = fd_max_rel(&wt, &gw, EPS, |v| loss(&x, v));
        assert!(ex.max(ew) < TOL, "seed {seed} {spec:?}: {ex} {ew}");
    }
}

/// Scatter form of a transposed convolution, written independently of the
/// library kernels.
fn naive_deconv(x: &Tensor, wt: &Tensor, spec: &ConvSpec) -> Tensor {
    let [n, cin, h, w] = x.dims4("x").unwrap();
    let (oh, ow) = spec.deconv_output_hw(h, w).unwrap();
    let cout = spec.in_channels;
    let (k, s, p) = (spec.kernel_h, spec.stride, spec.pad as isize);
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for b in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[((b * cin + ci) * h + y) * w + xx];
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * s + ky) as isize - p;
                                let ox = (xx * s + kx) as isize - p;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = wt.data()[((ci * cout + co) * k + ky) * k + kx];
                                out.data_mut()[((b * cout + co) * oh + oy as usize) * ow + ox as usize] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn deconv_is_bit_identical_to_conv_backward_data() {
    for seed in 0..50 {
        let mut r = rng(5000 + seed);
        let (spec, n, _, _) = random_spec(&mut r);
        let (h, w) = deconv_input_hw(&spec, &mut r);
        let x = randn(&mut r, &[n, spec.out_channels, h, w]);
        let wt = randn(&mut r, &spec.weight_shape());
        let deconv = deconv2d_forward(&x, &wt, &spec).unwrap();
        let conv_input = Tensor::zeros(&[n, spec.in_channels, deconv.shape()[2], deconv.shape()[3]]);
        let (grad_input, _, _) = conv2d_backward(&conv_input, &wt, &x, &spec).unwrap();
        assert_eq!(deconv.shape(), grad_input.shape());
        let same = deconv.data().iter().zip(grad_input.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "seed {seed} {spec:?}");
        let naive = naive_deconv(&x, &wt, &spec);
        for (a, b) in deconv.data().iter().zip(naive.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_is_linear_in_input_and_weights() {
    for seed in 0..SEEDS {
        let mut r = rng(2000 + seed);
        let (spec, n, h, w) = random_spec(&mut r);
        let x = randn(&mut r, &[n, spec.in_channels, h, w]);
        let wt = randn(&mut r, &spec.weight_shape());
        let zero = Tensor::zeros(&[spec.out_channels]);
        let a: f64 = r.random_range(-3.0..3.0);
        let base = conv2d_forward(&x, &wt, &zero, &spec).unwrap();
        let mut ax = x.clone();
        ax.scale(a);
        let mut aw = wt.clone();
        aw.scale(a);
        for scaled in [
            conv2d_forward(&ax, &wt, &zero, &spec).unwrap(),
            conv2d_forward(&x, &aw, &zero, &spec).unwrap(),
        ] {
            for (s, b) in scaled.data().iter().zip(base.data()) {
                assert!((s - a * b).abs() <= 1e-12 * (a * b).abs().max(1e-300) + 1e-15, "seed {seed}");
            }
        }
    }
}

#[test]
fn dense_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(3000 + seed);
        let (n, d, m) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..5));
        let x = randn(&mut r, &[n, d]);
        let wt = randn(&mut r, &[d, m]);
        let b = randn(&mut r, &[m]);
        let cot = randn(&mut r, &[n, m]);
        let (gx, gw, gb) = dense_backward(&x, &wt, &cot).unwrap();
        let loss = |x: &Tensor, wt: &Tensor, b: &Tensor| dot(&dense_forward(x, wt, b).unwrap(), &cot);
        let e = fd_max_rel(&x, &gx, EPS, |v| loss(v, &wt, &b))
            .max(fd_max_rel(&wt, &gw, EPS, |v| loss(&x, v, &b)))
            .max(fd_max_rel(&b, &gb, EPS, |v| loss(&x, &wt, v)));
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn relu_and_pool_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(4000 + seed);
        let shape = [r.random_range(1..3), r.random_range(1..3), 2 * r.random_range(1..4), 2 * r.random_range(1..4)];
        // Keep inputs away from the ReLU kink.
        let mut x = randn(&mut r, &shape);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let cot = randn(&mut r, &shape);
        let g = relu_backward(&x, &cot).unwrap();
        assert!(fd_max_rel(&x, &g, EPS, |v| dot(&relu_forward(v), &cot)) < TOL, "relu seed {seed}");
        for kind in [PoolKind::Max2x2Stride2, PoolKind::GlobalAvg] {
            let (out, state) = pool_forward(&x, kind).unwrap();
            let cot = randn(&mut r, out.shape());
            let g = pool_backward(&cot, &state, kind).unwrap();
            let e = fd_max_rel(&x, &g, EPS, |v| dot(&pool_forward(v, kind).unwrap().0, &cot));
            assert!(e < TOL, "{kind:?} seed {seed}: {e}");
            if kind == PoolKind::GlobalAvg {
                assert!((g.sum() - cot.sum()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(6000 + seed);
        let (n, k) = (r.random_range(1..5), r.random_range(2..5));
        let logits = randn(&mut r, &[n, k]);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (loss, g) = softmax_xent(&logits, &labels).unwrap();
        assert!(loss >= 0.0);
        let e = fd_max_rel(&logits, &g, EPS, |v| softmax_xent(v, &labels).unwrap().0);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn uniform_logits_give_ln_k() {
    for k in 2..6 {
        let (loss, _) = softmax_xent(&Tensor::filled(&[3, k], 0.7), &[0, 1, k - 1]).unwrap();
        assert!((loss - (k as f64).ln()).abs() <= 1e-12);
    }
}
