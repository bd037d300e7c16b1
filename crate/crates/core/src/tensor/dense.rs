use super::{check_shape, Tensor};
use crate::error::{Error, Result};

fn dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d) = match input.shape() {
        [n, rest @ ..] if !rest.is_empty() => (*n, rest.iter().product::<usize>()),
        s => return Err(Error::shape(format!("dense input must have a batch axis, got {s:?}"))),
    };
    match weights.shape() {
        [wd, m] if *wd == d => Ok((n, d, *m)),
        s => Err(Error::shape(format!(
            "dense weights {s:?} do not accept {d} input features"
        ))),
    }
}

/// Affine map `input · weights + bias`. Trailing input axes are flattened.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d, m) = dims(input, weights)?;
    check_shape(bias, &[m], "dense bias")?;
    let mut out = Tensor::zeros(&[n, m]);
    let (x, w) = (input.data(), weights.data());
    for (row, out_row) in out.data_mut().chunks_mut(m).enumerate() {
        out_row.copy_from_slice(bias.data());
        for k in 0..d {
            let xv = x[row * d + k];
            for (o, wv) in out_row.iter_mut().zip(&w[k * m..(k + 1) * m]) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`; `grad_input` has the
/// input's original shape.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_output: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d, m) = dims(input, weights)?;
    check_shape(grad_output, &[n, m], "dense grad_output")?;
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(&[m]);
    let (x, w, go) = (input.data(), weights.data(), grad_output.data());
    for row in 0..n {
        let g = &go[row * m..(row + 1) * m];
        for (b, v) in gb.data_mut().iter_mut().zip(g) {
            *b += v;
        }
        for k in 0..d {
            let xv = x[row * d + k];
            let w_row = &w[k * m..(k + 1) * m];
            gi.data_mut()[row * d + k] = w_row.iter().zip(g).map(|(a, b)| a * b).sum();
            for (acc, gv) in gw.data_mut()[k * m..(k + 1) * m].iter_mut().zip(g) {
                *acc += xv * gv;
            }
        }
    }
    Ok((gi, gw, gb))
}
