use crate::diff::Tensor;

use super::indexing::ChannelIndexing;
use super::layer::LayerKind;
use super::mask::PruningMask;
use super::network::{NetError, NetworkSpec};

/// Materializes `mask` by slicing pruned channels out of every tensor,
/// returning a smaller, self-consistent network. Kept channels preserve
/// their original relative order. Fails with `EmptyLayer` (first offender in
/// topological order) if any layer would lose all channels.
pub fn apply_mask(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: &PruningMask,
) -> Result<NetworkSpec, NetError> {
    idx.validate_mask(mask)?;

    let keeps: Vec<Vec<bool>> = (0..net.len()).map(|i| idx.keep_vec(mask, i)).collect();
    for (i, k) in keeps.iter().enumerate() {
        if !k.iter().any(|&b| b) {
            return Err(NetError::EmptyLayer { layer: i });
        }
    }
    let kept_idx: Vec<Vec<usize>> = keeps
        .iter()
        .map(|k| k.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
        .collect();

    let mut layers = Vec::with_capacity(net.len());
    for (i, l) in net.layers().iter().enumerate() {
        let mut nl = l.clone();
        match l.kind {
            LayerKind::Input => {}
            LayerKind::Conv2d => {
                let p = net.provider(i);
                let (out_k, in_k) = (&kept_idx[i], &kept_idx[p]);
                nl.out_channels = out_k.len();
                nl.in_channels = in_k.len();
                if let Some(w) = &l.weights {
                    nl.weights = Some(slice_conv_weights(w, out_k, in_k));
                }
                if let Some(b) = &l.bias {
                    nl.bias = Some(slice_vec(b, out_k));
                }
            }
            LayerKind::Linear => {
                let p = net.provider(i);
                let (out_k, in_k) = (&kept_idx[i], &kept_idx[p]);
                nl.out_channels = out_k.len();
                nl.in_channels = in_k.len();
                if let Some(w) = &l.weights {
                    nl.weights = Some(slice_matrix(w, out_k, in_k));
                }
                if let Some(b) = &l.bias {
                    nl.bias = Some(slice_vec(b, out_k));
                }
            }
            LayerKind::BatchNorm => {
                let k = &kept_idx[i];
                nl.in_channels = k.len();
                nl.out_channels = k.len();
                nl.weights = l.weights.as_ref().map(|t| slice_vec(t, k));
                nl.bias = l.bias.as_ref().map(|t| slice_vec(t, k));
                nl.bn_mean = l.bn_mean.as_ref().map(|t| slice_vec(t, k));
                nl.bn_var = l.bn_var.as_ref().map(|t| slice_vec(t, k));
            }
            LayerKind::Pool | LayerKind::Add => {
                let k = kept_idx[i].len();
                nl.in_channels = k;
                nl.out_channels = k;
            }
            LayerKind::Flatten => {
                let p = net.provider(i);
                nl.in_channels = kept_idx[p].len();
                nl.out_channels = kept_idx[i].len();
            }
            LayerKind::Output => {
                let p = net.provider(i);
                nl.in_channels = kept_idx[p].len();
                nl.out_channels = kept_idx[p].len();
            }
        }
        layers.push(nl);
    }

    NetworkSpec::new(layers, net.edges().to_vec(), net.input_resolution())
}

fn slice_vec(t: &Tensor<f32>, keep: &[usize]) -> Tensor<f32> {
    let data: Vec<f32> = keep.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(vec![keep.len()], data).expect("sized")
}

fn slice_matrix(t: &Tensor<f32>, rows: &[usize], cols: &[usize]) -> Tensor<f32> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let row = &t.data()[r * w..(r + 1) * w];
        for &c in cols {
            data.push(row[c]);
        }
    }
    Tensor::new(vec![rows.len(), cols.len()], data).expect("sized")
}

fn slice_conv_weights(t: &Tensor<f32>, out_k: &[usize], in_k: &[usize]) -> Tensor<f32> {
    let (ci, kh, kw) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let k2 = kh * kw;
    let mut data = Vec::with_capacity(out_k.len() * in_k.len() * k2);
    for &oc in out_k {
        for &ic in in_k {
            let base = (oc * ci + ic) * k2;
            data.extend_from_slice(&t.data()[base..base + k2]);
        }
    }
    Tensor::new(vec![out_k.len(), in_k.len(), kh, kw], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::accounting::{flops, param_count};
    use crate::net::indexing::build_indexing;
    use crate::net::layer::{EdgeKind, LayerKind as K, LayerSpec, Nonlinearity};
    use crate::net::network::Edge;

    fn weighted_chain() -> NetworkSpec {
        let mut conv = LayerSpec::new(1, K::Conv2d, 1, 3)
            .with_kernel(3, 3)
            .with_padding(1, 1)
            .with_activation(Nonlinearity::Relu)
            .prunable(true);
        let wdata: Vec<f32> = (0..27).map(|i| i as f32 * 0.1).collect();
        conv.weights = Some(Tensor::new(vec![3, 1, 3, 3], wdata).unwrap());
        conv.bias = Some(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut lin = LayerSpec::new(3, K::Linear, 48, 5);
        lin.weights = Some(Tensor::new(vec![5, 48], (0..240).map(|i| i as f32).collect()).unwrap());
        lin.bias = Some(Tensor::zeros(&[5]));
        let layers = vec![
            LayerSpec::new(0, K::Input, 1, 1),
            conv,
            LayerSpec::new(2, K::Flatten, 3, 48),
            lin,
            LayerSpec::new(4, K::Output, 5, 5),
        ];
        let edges = (0..4).map(|i| Edge::new(i, i + 1, EdgeKind::Regular)).collect();
        NetworkSpec::new(layers, edges, (1, 4, 4)).unwrap()
    }

    #[test]
    fn slices_weights_preserving_order() {
        let net = weighted_chain();
        let idx = build_indexing(&net).unwrap();
        let mut mask = PruningMask::keep_all(3);
        mask.set_pruned(1, true);
        let small = apply_mask(&net, &idx, &mask).unwrap();

        assert_eq!(small.layer(1).out_channels, 2);
        let w = small.layer(1).weights.as_ref().unwrap();
        assert_eq!(w.shape(), &[2, 1, 3, 3]);
        assert!((w.data()[0] - 0.0).abs() < 1e-6);
        assert!((w.data()[9] - 1.8).abs() < 1e-6); // channel 2 follows channel 0
        assert_eq!(small.layer(1).bias.as_ref().unwrap().data(), &[0.1, 0.3]);

        // linear keeps feature blocks of channels 0 and 2
        let lw = small.layer(3).weights.as_ref().unwrap();
        assert_eq!(lw.shape(), &[5, 32]);
        assert_eq!(lw.data()[0], 0.0);
        assert_eq!(lw.data()[16], 32.0); // first feature of channel 2's block
        assert_eq!(small.layer(2).out_channels, 32);
    }

    #[test]
    fn accounting_matches_on_applied_net() {
        let net = weighted_chain();
        let idx = build_indexing(&net).unwrap();
        let mut mask = PruningMask::keep_all(3);
        mask.set_pruned(0, true);
        let small = apply_mask(&net, &idx, &mask).unwrap();
        let small_idx = build_indexing(&small).unwrap();
        let keep_small = PruningMask::keep_all(small_idx.num_units());

        let masked_flops = flops(&net, &idx, &mask).unwrap();
        let applied_flops = flops(&small, &small_idx, &keep_small).unwrap();
        assert_eq!(masked_flops, applied_flops);

        let masked_params = param_count(&net, &idx, &mask).unwrap();
        let applied_params = param_count(&small, &small_idx, &keep_small).unwrap();
        assert_eq!(masked_params, applied_params);

        let mut count = 0u64;
        for l in small.layers() {
            for t in [&l.weights, &l.bias] {
                if let Some(t) = t {
                    count += t.len() as u64;
                }
            }
        }
        assert_eq!(count, applied_params, "param count equals stored elements");
    }

    #[test]
    fn emptying_a_layer_is_an_error() {
        let net = weighted_chain();
        let idx = build_indexing(&net).unwrap();
        let mask = PruningMask::from_bits(vec![true, true, true]);
        match apply_mask(&net, &idx, &mask) {
            Err(NetError::EmptyLayer { layer: 1 }) => {}
            other => panic!("expected EmptyLayer(1), got {other:?}"),
        }
    }
}
