use super::Tensor;
use crate::error::{Error, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient of ReLU given the forward input. The kink at zero routes nothing.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_output.shape() {
        return Err(Error::shape(format!(
            "relu grad {:?} does not match input {:?}",
            grad_output.shape(),
            input.shape()
        )));
    }
    let mut grad = grad_output.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::shape(format!("logits must be [N, K], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
    }
    let (loss_sum, mut grad) = softmax_xent_sum(logits.data(), labels, k);
    grad.iter_mut().for_each(|g| *g /= n as f64);
    Ok((loss_sum / n as f64, Tensor::from_vec(&[n, k], grad)?))
}

/// Summed cross-entropy over the batch and the gradient of that sum.
pub(crate) fn softmax_xent_sum_tensor(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let k = logits.shape()[logits.shape().len() - 1];
    let (loss, grad) = softmax_xent_sum(logits.data(), labels, k);
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// Summed (not averaged) cross-entropy and its gradient, row by row.
pub(crate) fn softmax_xent_sum(logits: &[f64], labels: &[usize], k: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &label) in logits.chunks(k).zip(grad.chunks_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            denom += *gi;
        }
        loss += denom.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi /= denom;
        }
        g[label] -= 1.0;
    }
    (loss, grad)
}
