use super::indexing::ChannelIndexing;
use super::layer::{LayerKind, LayerSpec};
use super::mask::PruningMask;
use super::network::{NetError, NetworkSpec};

/// FLOPs of layer `i` under an optional mask, counting one multiply-accumulate
/// as two floating point operations. Only `Conv2d` and `Linear` consume FLOPs;
/// normalization, pooling and additions are free by convention.
pub fn layer_flops(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: Option<&PruningMask>,
    i: usize,
) -> u64 {
    let l = net.layer(i);
    if !matches!(l.kind, LayerKind::Conv2d | LayerKind::Linear) {
        return 0;
    }
    let p = net.provider(i);
    let kept_out = match mask {
        Some(m) => idx.kept_count(m, i) as u64,
        None => l.out_channels as u64,
    };
    let kept_in = match (mask, l.kind) {
        (Some(m), _) => idx.kept_count(m, p) as u64,
        (None, LayerKind::Conv2d) => net.out(p).channels as u64,
        (None, _) => net.out(p).features as u64,
    };
    match l.kind {
        LayerKind::Conv2d => {
            let (ho, wo) = net.out(i).hw.expect("conv output is spatial");
            2 * kept_out * kept_in * l.kernel.0 as u64 * l.kernel.1 as u64 * (ho * wo) as u64
        }
        _ => 2 * kept_out * kept_in,
    }
}

/// Total forward FLOPs for one input sample under `mask`.
pub fn flops(net: &NetworkSpec, idx: &ChannelIndexing, mask: &PruningMask) -> Result<u64, NetError> {
    idx.validate_mask(mask)?;
    Ok((0..net.len()).map(|i| layer_flops(net, idx, Some(mask), i)).sum())
}

/// Masked FLOPs relative to the unpruned network.
pub fn flops_ratio(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: &PruningMask,
) -> Result<f64, NetError> {
    idx.validate_mask(mask)?;
    let full: u64 = (0..net.len()).map(|i| layer_flops(net, idx, None, i)).sum();
    if full == 0 {
        return Ok(1.0);
    }
    Ok(flops(net, idx, mask)? as f64 / full as f64)
}

/// Number of stored parameter elements (weights, biases, affine coefficients)
/// that survive `mask`. Running statistics are buffers, not parameters.
pub fn param_count(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: &PruningMask,
) -> Result<u64, NetError> {
    idx.validate_mask(mask)?;
    let mut total = 0u64;
    for (i, l) in net.layers().iter().enumerate() {
        let kept_out = idx.kept_count(mask, i) as u64;
        match l.kind {
            LayerKind::Conv2d => {
                let kept_in = idx.kept_count(mask, net.provider(i)) as u64;
                if l.weights.is_some() {
                    total += kept_out * kept_in * l.kernel.0 as u64 * l.kernel.1 as u64;
                }
                if l.bias.is_some() {
                    total += kept_out;
                }
            }
            LayerKind::Linear => {
                let kept_in = idx.kept_count(mask, net.provider(i)) as u64;
                if l.weights.is_some() {
                    total += kept_out * kept_in;
                }
                if l.bias.is_some() {
                    total += kept_out;
                }
            }
            LayerKind::BatchNorm => {
                if l.weights.is_some() {
                    total += kept_out;
                }
                if l.bias.is_some() {
                    total += kept_out;
                }
            }
            _ => {}
        }
    }
    Ok(total)
}

/// Per-output-channel L1 norm of a layer's weight tensor. Unweighted layers
/// of a valid kind report zeros; other kinds are an error.
pub fn channel_l1(net: &NetworkSpec, i: usize) -> Result<Vec<f32>, NetError> {
    let l: &LayerSpec = net.layer(i);
    match l.kind {
        LayerKind::Conv2d | LayerKind::Linear => {
            let c = l.out_channels;
            let Some(w) = &l.weights else {
                return Ok(vec![0.0; c]);
            };
            let per = w.len() / c;
            Ok((0..c)
                .map(|ch| w.data()[ch * per..(ch + 1) * per].iter().map(|v| v.abs()).sum())
                .collect())
        }
        _ => Err(NetError::UnsupportedLayer { layer: i, op: "channel_l1" }),
    }
}

/// Summed channel L1 over all member atoms of one decision unit.
pub fn unit_l1(net: &NetworkSpec, idx: &ChannelIndexing, unit: usize) -> Result<f32, NetError> {
    let mut total = 0.0f32;
    for &(layer, ch) in idx.unit(unit) {
        total += channel_l1(net, layer)?[ch];
    }
    Ok(total)
}
