use std::collections::HashSet;

use crate::diff::Tensor;

use super::accounting::{channel_l1, layer_flops};
use super::indexing::ChannelIndexing;
use super::mask::PruningMask;
use super::network::{NetError, NetworkSpec};

/// Structural and computational node features preceding the padded
/// per-channel blocks.
pub const NODE_BASE_FEATURES: usize = 10;

/// Observation graph handed to the encoder: one node per layer, one edge per
/// dataflow edge, with dense feature matrices.
///
/// Node feature layout (`d = 10 + 2*c_max`):
/// `[kind, in_ch, out_ch, kh, kw, sh, sw, flops_keep_ratio, params_keep_ratio,
///   flops_share, l1[c_max], group_marker[c_max]]`
///
/// Edge feature layout (`d_e = 4`): one-hot edge kind plus the mean absolute
/// activation of the source layer (0 when no statistics are supplied).
#[derive(Debug, Clone)]
pub struct GraphObservation {
    pub node_features: Tensor<f32>,
    /// `(src, dst)` per edge, same order as `NetworkSpec::edges`.
    pub edge_index: Vec<(usize, usize)>,
    pub edge_features: Tensor<f32>,
    pub c_max: usize,
}

impl GraphObservation {
    pub fn num_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn node_dim(&self) -> usize {
        self.node_features.shape()[1]
    }
}

/// Builds the observation for `net` under `mask`, marking the units in
/// `marked_units` (the group the policy is about to decide).
///
/// `edge_activation_l1`, when given, carries one value per network edge.
/// `c_max` fixes the padded channel width and must dominate every layer.
pub fn build_graph(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: &PruningMask,
    marked_units: &[usize],
    edge_activation_l1: Option<&[f32]>,
    c_max: usize,
) -> Result<GraphObservation, NetError> {
    idx.validate_mask(mask)?;
    for &u in marked_units {
        if u >= idx.num_units() {
            return Err(NetError::BadArg(format!(
                "marked unit {u} out of range ({} units)",
                idx.num_units()
            )));
        }
    }
    if let Some(stats) = edge_activation_l1 {
        if stats.len() != net.edges().len() {
            return Err(NetError::BadArg(format!(
                "{} edge stats for {} edges",
                stats.len(),
                net.edges().len()
            )));
        }
    }
    let marked: HashSet<usize> = marked_units.iter().copied().collect();

    let n = net.len();
    let d = NODE_BASE_FEATURES + 2 * c_max;
    let mut nodes = Tensor::zeros(&[n, d]);
    let total_flops: u64 = (0..n).map(|i| layer_flops(net, idx, None, i)).sum();

    for i in 0..n {
        let l = net.layer(i);
        if l.kind.produces_channels() && l.out_channels > c_max {
            return Err(NetError::PaddingOverflow {
                layer: i,
                channels: l.out_channels,
                c_max,
            });
        }
        let full = layer_flops(net, idx, None, i);
        let kept = layer_flops(net, idx, Some(mask), i);
        let flops_keep_ratio = if full == 0 { 1.0 } else { kept as f64 / full as f64 };

        let (full_p, kept_p) = layer_param_counts(net, idx, mask, i);
        let params_keep_ratio = if full_p == 0 { 1.0 } else { kept_p as f64 / full_p as f64 };

        let flops_share = if total_flops == 0 { 0.0 } else { full as f64 / total_flops as f64 };

        let row = &mut nodes.data_mut()[i * d..(i + 1) * d];
        row[0] = f32::from(l.kind.code());
        row[1] = l.in_channels as f32;
        row[2] = l.out_channels as f32;
        row[3] = l.kernel.0 as f32;
        row[4] = l.kernel.1 as f32;
        row[5] = l.stride.0 as f32;
        row[6] = l.stride.1 as f32;
        row[7] = flops_keep_ratio as f32;
        row[8] = params_keep_ratio as f32;
        row[9] = flops_share as f32;

        if matches!(l.kind, super::layer::LayerKind::Conv2d | super::layer::LayerKind::Linear) {
            let l1 = channel_l1(net, i)?;
            let keep = idx.keep_vec(mask, i);
            for c in 0..l.out_channels.min(c_max) {
                if keep[c] {
                    row[NODE_BASE_FEATURES + c] = l1[c];
                }
                let in_marked = idx
                    .unit_of(i, c)
                    .map(|u| marked.contains(&u))
                    .unwrap_or(false);
                if in_marked {
                    row[NODE_BASE_FEATURES + c_max + c] = 1.0;
                }
            }
        }
    }

    let edge_index: Vec<(usize, usize)> = net.edges().iter().map(|e| (e.src, e.dst)).collect();
    let ne = edge_index.len();
    let mut efeat = Tensor::zeros(&[ne, 4]);
    for (k, e) in net.edges().iter().enumerate() {
        let row = &mut efeat.data_mut()[k * 4..(k + 1) * 4];
        row[..3].copy_from_slice(&e.kind.one_hot());
        row[3] = edge_activation_l1.map(|s| s[k]).unwrap_or(0.0);
    }

    Ok(GraphObservation {
        node_features: nodes,
        edge_index,
        edge_features: efeat,
        c_max,
    })
}

fn layer_param_counts(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: &PruningMask,
    i: usize,
) -> (u64, u64) {
    use super::layer::LayerKind as K;
    let l = net.layer(i);
    let per_out_full: u64;
    let per_out_kept: u64;
    match l.kind {
        K::Conv2d | K::Linear => {
            let p = net.provider(i);
            let full_in = if l.kind == K::Conv2d {
                net.out(p).channels as u64
            } else {
                net.out(p).features as u64
            };
            let kept_in = idx.kept_count(mask, p) as u64;
            let kxk = if l.kind == K::Conv2d {
                (l.kernel.0 * l.kernel.1) as u64
            } else {
                1
            };
            let bias: u64 = l.bias.is_some().into();
            per_out_full = u64::from(l.weights.is_some()) * full_in * kxk + bias;
            per_out_kept = u64::from(l.weights.is_some()) * kept_in * kxk + bias;
        }
        K::BatchNorm => {
            let coeffs = u64::from(l.weights.is_some()) + u64::from(l.bias.is_some());
            per_out_full = coeffs;
            per_out_kept = coeffs;
        }
        _ => return (0, 0),
    }
    let full_out = l.out_channels as u64;
    let kept_out = idx.kept_count(mask, i) as u64;
    (per_out_full * full_out, per_out_kept * kept_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::indexing::build_indexing;
    use crate::net::layer::{EdgeKind, LayerKind as K, LayerSpec as L};
    use crate::net::network::Edge;

    fn small_net() -> NetworkSpec {
        let mut conv = L::new(1, K::Conv2d, 1, 3).with_kernel(3, 3).with_padding(1, 1).prunable(true);
        conv.weights = Some(Tensor::full(&[3, 1, 3, 3], 1.0));
        let mut lin = L::new(3, K::Linear, 3 * 4 * 4, 2);
        lin.weights = Some(Tensor::full(&[2, 48], 1.0));
        let layers = vec![
            L::new(0, K::Input, 1, 1),
            conv,
            L::new(2, K::Flatten, 3, 48),
            lin,
            L::new(4, K::Output, 2, 2),
        ];
        let edges = (0..4).map(|i| Edge::new(i, i + 1, EdgeKind::Regular)).collect();
        NetworkSpec::new(layers, edges, (1, 4, 4)).unwrap()
    }

    #[test]
    fn feature_layout_and_padding() {
        let net = small_net();
        let idx = build_indexing(&net).unwrap();
        let mask = PruningMask::keep_all(3);
        let g = build_graph(&net, &idx, &mask, &[0, 2], None, 8).unwrap();
        assert_eq!(g.num_nodes(), 5);
        assert_eq!(g.node_dim(), 10 + 16);
        let d = g.node_dim();
        let conv_row = &g.node_features.data()[d..2 * d];
        assert_eq!(conv_row[0], 1.0); // conv kind code
        assert_eq!(conv_row[2], 3.0);
        assert_eq!(conv_row[7], 1.0); // nothing pruned yet
        assert_eq!(conv_row[10], 9.0); // l1 of a 3x3 all-ones kernel
        assert_eq!(conv_row[10 + 8], 1.0); // unit 0 marked
        assert_eq!(conv_row[10 + 8 + 1], 0.0); // unit 1 not marked
        assert_eq!(conv_row[10 + 8 + 2], 1.0); // unit 2 marked
    }

    #[test]
    fn pruned_channel_zeroes_l1_slot() {
        let net = small_net();
        let idx = build_indexing(&net).unwrap();
        let mut mask = PruningMask::keep_all(3);
        mask.set_pruned(1, true);
        let g = build_graph(&net, &idx, &mask, &[], None, 4).unwrap();
        let d = g.node_dim();
        let conv_row = &g.node_features.data()[d..2 * d];
        assert_eq!(conv_row[10], 9.0);
        assert_eq!(conv_row[11], 0.0);
        assert_eq!(conv_row[12], 9.0);
        assert!(conv_row[7] < 1.0, "flops ratio reflects pruning");
    }

    #[test]
    fn overflow_and_bad_marks_are_errors() {
        let net = small_net();
        let idx = build_indexing(&net).unwrap();
        let mask = PruningMask::keep_all(3);
        assert!(matches!(
            build_graph(&net, &idx, &mask, &[], None, 2),
            Err(NetError::PaddingOverflow { .. })
        ));
        assert!(matches!(
            build_graph(&net, &idx, &mask, &[7], None, 8),
            Err(NetError::BadArg(_))
        ));
    }

    #[test]
    fn edge_features_carry_kind_and_stats() {
        let net = small_net();
        let idx = build_indexing(&net).unwrap();
        let mask = PruningMask::keep_all(3);
        let stats = vec![0.1, 0.2, 0.3, 0.4];
        let g = build_graph(&net, &idx, &mask, &[], Some(&stats), 8).unwrap();
        assert_eq!(g.edge_features.shape(), &[4, 4]);
        assert_eq!(g.edge_features.at2(0, 0), 1.0);
        assert_eq!(g.edge_features.at2(2, 3), 0.3);
    }
}
