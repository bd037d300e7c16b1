use serde::{Deserialize, Serialize};

use super::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution. Cross-correlation convention, no kernel flip.
///
/// A transposed convolution is described by the spec of the forward
/// convolution whose data gradient it computes, so for a deconvolution
/// `out_channels` is its *input* channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape(format!("conv channels must be positive: {self:?}")));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::shape(format!("conv kernel and stride must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Output extent `floor((in + 2 pad - kernel) / stride) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(format!(
                "input {h}x{w} with pad {} is smaller than kernel {}x{}",
                self.pad, self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Output extent of the transposed convolution: `(in - 1) * stride + kernel - 2 pad`.
    pub fn deconv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("deconv input has zero spatial extent"));
        }
        let oh = (h - 1) * self.stride + self.kernel_h;
        let ow = (w - 1) * self.stride + self.kernel_w;
        if oh <= 2 * self.pad || ow <= 2 * self.pad {
            return Err(Error::shape(format!(
                "deconv of {h}x{w} with pad {} has empty output",
                self.pad
            )));
        }
        Ok((oh - 2 * self.pad, ow - 2 * self.pad))
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, h: usize, w: usize) -> Result<Self> {
        let (oh, ow) = spec.output_hw(h, w)?;
        Ok(Geometry {
            cin: spec.in_channels,
            cout: spec.out_channels,
            h,
            w,
            oh,
            ow,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    /// Output positions `o` in `0..n_out` with `0 <= o*stride + k - pad < n_in`.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        if n_in + self.pad <= k {
            return (0, 0);
        }
        let hi = ((n_in - 1 + self.pad - k) / s + 1).min(n_out);
        (lo.min(hi), hi)
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }
}

/// `out += conv(input, weights)` for one sample.
fn forward_sample(g: &Geometry, input: &[f64], weights: &[f64], out: &mut [f64]) {
    let (h, w, oh, ow, s) = (g.h, g.w, g.oh, g.ow, g.stride);
    for co in 0..g.cout {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..g.kw {
                    let wv = weights[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let in_row = &in_c[iy * w..(iy + 1) * w];
                        let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = kx as isize - g.pad as isize;
                            let src = &in_row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            for (o, i) in out_row[x0..x1].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] += wv * in_row[ox * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `grad_in += conv^T(grad_out, weights)` for one sample: the data gradient
/// of the convolution, which is also the transposed-convolution forward map.
fn backward_data_sample(g: &Geometry, grad_out: &[f64], weights: &[f64], grad_in: &mut [f64]) {
    let (h, w, oh, ow, s) = (g.h, g.w, g.oh, g.ow, g.stride);
    for co in 0..g.cout {
        let go_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let gi_c = &mut grad_in[ci * h * w..(ci + 1) * h * w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..g.kw {
                    let wv = weights[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let go_row = &go_c[oy * ow..(oy + 1) * ow];
                        let gi_row = &mut gi_c[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let off = kx as isize - g.pad as isize;
                            let dst = &mut gi_row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            for (d, o) in dst.iter_mut().zip(&go_row[x0..x1]) {
                                *d += wv * o;
                            }
                        } else {
                            for ox in x0..x1 {
                                gi_row[ox * s + kx - g.pad] += wv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `grad_w += d conv / d weights` for one sample.
fn backward_weights_sample(g: &Geometry, input: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
    let (h, w, oh, ow, s) = (g.h, g.w, g.oh, g.ow, g.stride);
    for co in 0..g.cout {
        let go_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let in_row = &in_c[iy * w..(iy + 1) * w];
                        let go_row = &go_c[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = kx as isize - g.pad as isize;
                            let src = &in_row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            for (o, i) in go_row[x0..x1].iter().zip(src) {
                                acc += o * i;
                            }
                        } else {
                            for ox in x0..x1 {
                                acc += go_row[ox] * in_row[ox * s + kx - g.pad];
                            }
                        }
                    }
                    grad_w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

fn check_conv_operands(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<(usize, Geometry)> {
    let [n, c, h, w] = input.dims4("conv input")?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    check_shape(weights, &spec.weight_shape(), "conv weights")?;
    Ok((n, Geometry::new(spec, h, w)?))
}

pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, g) = check_conv_operands(input, weights, spec)?;
    check_shape(bias, &[spec.out_channels], "conv bias")?;
    let mut out = Tensor::zeros(&[n, g.cout, g.oh, g.ow]);
    let plane = g.oh * g.ow;
    for (s, out_s) in out.data_mut().chunks_mut(g.out_len()).enumerate() {
        for (co, chunk) in out_s.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        forward_sample(&g, &input.data()[s * g.in_len()..(s + 1) * g.in_len()], weights.data(), out_s);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_output: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, g) = check_conv_operands(input, weights, spec)?;
    check_shape(grad_output, &[n, g.cout, g.oh, g.ow], "conv grad_output")?;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = Tensor::zeros(&[g.cout]);
    let plane = g.oh * g.ow;
    for s in 0..n {
        let go = &grad_output.data()[s * g.out_len()..(s + 1) * g.out_len()];
        let x = &input.data()[s * g.in_len()..(s + 1) * g.in_len()];
        backward_data_sample(
            &g,
            go,
            weights.data(),
            &mut grad_input.data_mut()[s * g.in_len()..(s + 1) * g.in_len()],
        );
        backward_weights_sample(&g, x, go, grad_weights.data_mut());
        for (co, gb) in grad_bias.data_mut().iter_mut().enumerate() {
            *gb += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

/// Transposed convolution computed by the data-gradient pass of the
/// convolution described by `spec`. Weights are `[Cin, Cout, Kh, Kw]` from the
/// deconvolution's point of view, which is the conv weight layout of `spec`.
pub fn deconv2d_forward(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("deconv input")?;
    if c != spec.out_channels {
        return Err(Error::shape(format!(
            "deconv input has {c} channels, spec expects {}",
            spec.out_channels
        )));
    }
    check_shape(weights, &spec.weight_shape(), "deconv weights")?;
    let (oh, ow) = spec.deconv_output_hw(h, w)?;
    let g = Geometry::new(spec, oh, ow)?;
    if (g.oh, g.ow) != (h, w) {
        return Err(Error::Internal(format!(
            "deconv geometry mismatch: {oh}x{ow} maps back to {}x{}, not {h}x{w}",
            g.oh, g.ow
        )));
    }
    let mut out = Tensor::zeros(&[n, spec.in_channels, oh, ow]);
    for (s, out_s) in out.data_mut().chunks_mut(g.in_len()).enumerate() {
        backward_data_sample(&g, &input.data()[s * g.out_len()..(s + 1) * g.out_len()], weights.data(), out_s);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights)`. The data gradient is a plain forward
/// convolution of `grad_output`.
pub fn deconv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_output: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    let [n, _, h, w] = input.dims4("deconv input")?;
    let (oh, ow) = spec.deconv_output_hw(h, w)?;
    check_shape(grad_output, &[n, spec.in_channels, oh, ow], "deconv grad_output")?;
    check_shape(weights, &spec.weight_shape(), "deconv weights")?;
    let g = Geometry::new(spec, oh, ow)?;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    for s in 0..n {
        let go = &grad_output.data()[s * g.in_len()..(s + 1) * g.in_len()];
        forward_sample(
            &g,
            go,
            weights.data(),
            &mut grad_input.data_mut()[s * g.out_len()..(s + 1) * g.out_len()],
        );
        backward_weights_sample(
            &g,
            go,
            &input.data()[s * g.out_len()..(s + 1) * g.out_len()],
            grad_weights.data_mut(),
        );
    }
    Ok((grad_input, grad_weights))
}
