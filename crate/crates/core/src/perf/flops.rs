use crate::models::{Layer, LayerKind, Network};

/// `(forward, backward)` FLOPs of one layer for a batch of `batch` samples.
///
/// A multiply-add counts as 2 FLOPs. Conv and dense backward is twice the
/// forward (data and weight passes); a deconvolution costs the same as the
/// convolution it transposes. Pooling and ReLU cost 1 FLOP per output
/// element in each direction.
pub fn layer_flops(layer: &Layer, batch: usize) -> (u64, u64) {
    let n = batch as u64;
    let [_, ih, iw] = layer.input_shape.map(|v| v as u64);
    let [oc, oh, ow] = layer.output_shape.map(|v| v as u64);
    match layer.kind {
        LayerKind::Conv(s) => {
            let f = 2 * (s.kernel_h * s.kernel_w * s.in_channels * s.out_channels) as u64 * oh * ow * n;
            (f, 2 * f)
        }
        LayerKind::Deconv(s) => {
            let f = 2 * (s.kernel_h * s.kernel_w * s.in_channels * s.out_channels) as u64 * ih * iw * n;
            (f, 2 * f)
        }
        LayerKind::Dense { inputs, outputs } => {
            let f = 2 * (inputs * outputs) as u64 * n;
            (f, 2 * f)
        }
        LayerKind::Relu | LayerKind::Pool(_) => {
            let f = oc * oh * ow * n;
            (f, f)
        }
    }
}

/// Forward plus backward FLOPs of one training iteration.
pub fn model_flops(net: &Network, batch: usize) -> u64 {
    net.layers()
        .map(|l| {
            let (f, b) = layer_flops(l, batch);
            f + b
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_hep_mini, HepConfig};

    #[test]
    fn linear_in_batch() {
        let net = build_hep_mini(&HepConfig::default()).unwrap();
        for l in net.layers() {
            let (f1, b1) = layer_flops(l, 1);
            let (f8, b8) = layer_flops(l, 8);
            assert_eq!((f8, b8), (8 * f1, 8 * b1));
            assert!(f1 > 0);
        }
        assert_eq!(model_flops(&net, 8), 8 * model_flops(&net, 1));
    }
}
