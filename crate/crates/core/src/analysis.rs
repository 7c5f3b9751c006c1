//! Mask comparison and sparsity reporting.
//!
//! Similarity metrics treat a mask as its pruned-unit set (bit = pruned);
//! the complementary convention would change Jaccard, so this is fixed
//! here and stated in reports. Degenerate cases are total: two empty
//! pruned sets are identical (Jaccard 1), and any zero vector has cosine 0.

use rand::Rng;
use thiserror::Error;

use crate::net::{
    layer_flops, unit_l1, ChannelIndexing, NetError, NetworkSpec, PruningMask,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("masks differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("keep rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("expected {want} per-layer rates, got {got}")]
    RateCount { want: usize, got: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn check_len(a: &PruningMask, b: &PruningMask) -> Result<(), AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch { a: a.len(), b: b.len() });
    }
    Ok(())
}

/// |P_a ∩ P_b| / |P_a ∪ P_b| over pruned sets; 1.0 when both are empty.
pub fn jaccard(a: &PruningMask, b: &PruningMask) -> Result<f64, AnalysisError> {
    check_len(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Cosine of the 0/1 pruned-indicator vectors; 0.0 if either is all zero.
pub fn cosine(a: &PruningMask, b: &PruningMask) -> Result<f64, AnalysisError> {
    check_len(a, b)?;
    let dot = a.bits().iter().zip(b.bits()).filter(|(&x, &y)| x && y).count();
    let na = a.pruned_count();
    let nb = b.pruned_count();
    Ok(if na == 0 || nb == 0 {
        0.0
    } else {
        dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt())
    })
}

/// Count of positions where the masks disagree.
pub fn hamming(a: &PruningMask, b: &PruningMask) -> Result<usize, AnalysisError> {
    check_len(a, b)?;
    Ok(a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSimilarity {
    pub jaccard: f64,
    pub cosine: f64,
    pub hamming: usize,
}

pub fn similarity(a: &PruningMask, b: &PruningMask) -> Result<MaskSimilarity, AnalysisError> {
    Ok(MaskSimilarity {
        jaccard: jaccard(a, b)?,
        cosine: cosine(a, b)?,
        hamming: hamming(a, b)?,
    })
}

/// Unit ids owned by layer `i`, in channel order without duplicates.
pub fn layer_units(net: &NetworkSpec, idx: &ChannelIndexing, i: usize) -> Vec<usize> {
    let mut seen = Vec::new();
    for c in 0..net.layer(i).out_channels as usize {
        if let Some(u) = idx.unit_of(i, c) {
            if !seen.contains(&u) {
                seen.push(u);
            }
        }
    }
    seen
}

/// Similarity over each layer's own units; layers without units are skipped.
pub fn per_layer_similarity(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    a: &PruningMask,
    b: &PruningMask,
) -> Result<Vec<(usize, MaskSimilarity)>, AnalysisError> {
    check_len(a, b)?;
    let mut out = Vec::new();
    for i in 0..net.len() {
        let units = layer_units(net, idx, i);
        if units.is_empty() {
            continue;
        }
        let restrict = |m: &PruningMask| {
            PruningMask::from_bits(units.iter().map(|&u| m.is_pruned(u)).collect())
        };
        out.push((i, similarity(&restrict(a), &restrict(b))?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSparsity {
    pub layer: usize,
    pub kept: usize,
    pub pruned: usize,
    /// Masked over unmasked layer FLOPs; 1.0 for layers that consume none.
    pub flops_ratio: f64,
}

pub fn layer_sparsity_report(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: &PruningMask,
) -> Result<Vec<LayerSparsity>, AnalysisError> {
    idx.validate_mask(mask)?;
    let mut out = Vec::with_capacity(net.len());
    for i in 0..net.len() {
        let total = net.layer(i).out_channels as usize;
        let kept = idx.kept_count(mask, i);
        let full = layer_flops(net, idx, None, i);
        let masked = layer_flops(net, idx, Some(mask), i);
        out.push(LayerSparsity {
            layer: i,
            kept,
            pruned: total - kept,
            flops_ratio: if full == 0 { 1.0 } else { masked as f64 / full as f64 },
        });
    }
    Ok(out)
}

/// Keeps the ⌈rate·units⌉ largest-ℓ1 units of every channel-producing
/// layer; on equal norms the lower-index unit is pruned first. A unit
/// coupled across layers stays only if every owning layer keeps it.
pub fn weight_magnitude_mask(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    rates: &[f64],
) -> Result<PruningMask, AnalysisError> {
    if rates.len() != net.len() {
        return Err(AnalysisError::RateCount { want: net.len(), got: rates.len() });
    }
    if let Some(&r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(AnalysisError::BadRate(r));
    }
    let mut mask = PruningMask::keep_all(idx.num_units());
    for i in 0..net.len() {
        let units = layer_units(net, idx, i);
        if units.is_empty() {
            continue;
        }
        let keep = (rates[i] * units.len() as f64).ceil() as usize;
        let mut ranked: Vec<(usize, f32)> = units
            .iter()
            .map(|&u| Ok((u, unit_l1(net, idx, u)?)))
            .collect::<Result<_, NetError>>()?;
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0))
        });
        for &(u, _) in ranked.iter().skip(keep) {
            mask.set_pruned(u, true);
        }
    }
    Ok(mask)
}

pub fn uniform_magnitude_mask(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    rate: f64,
) -> Result<PruningMask, AnalysisError> {
    weight_magnitude_mask(net, idx, &vec![rate; net.len()])
}

/// Uniformly random mask pruning exactly `pruned` of `units`.
pub fn random_mask(units: usize, pruned: usize, rng: &mut impl Rng) -> PruningMask {
    let pruned = pruned.min(units);
    let mut order: Vec<usize> = (0..units).collect();
    for i in 0..pruned {
        let j = rng.gen_range(i..units);
        order.swap(i, j);
    }
    let mut mask = PruningMask::keep_all(units);
    for &u in &order[..pruned] {
        mask.set_pruned(u, true);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_indexing, flops};
    use crate::seed::rng_from_seed;
    use crate::toynets;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn mask_of(bits: &[u8]) -> PruningMask {
        PruningMask::from_bits(bits.iter().map(|&b| b != 0).collect())
    }

    #[test]
    fn identical_masks_are_perfectly_similar() {
        let a = mask_of(&[1, 0, 1, 1, 0]);
        let s = similarity(&a, &a).unwrap();
        assert_eq!(s.jaccard, 1.0);
        assert!((s.cosine - 1.0).abs() < 1e-12);
        assert_eq!(s.hamming, 0);
    }

    #[test]
    fn hand_enumerated_example_checks_out() {
        let a = mask_of(&[1, 1, 0, 0]);
        let b = mask_of(&[1, 0, 1, 0]);
        let s = similarity(&a, &b).unwrap();
        assert!((s.jaccard - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.cosine - 0.5).abs() < 1e-12);
        assert_eq!(s.hamming, 2);
    }

    #[test]
    fn disjoint_equal_size_sets_have_zero_jaccard() {
        let a = mask_of(&[1, 1, 0, 0]);
        let b = mask_of(&[0, 0, 1, 1]);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_cases_are_total() {
        let empty = mask_of(&[0, 0, 0]);
        let some = mask_of(&[1, 0, 0]);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(cosine(&empty, &some).unwrap(), 0.0);
        assert_eq!(cosine(&empty, &empty).unwrap(), 0.0);
        assert!(matches!(
            jaccard(&empty, &mask_of(&[0, 0])),
            Err(AnalysisError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn hamming_matches_set_arithmetic(bits_a in prop::collection::vec(any::<bool>(), 1..64),
                                          bits_b_seed in any::<u64>()) {
            let n = bits_a.len();
            let mut rng = rng_from_seed(bits_b_seed);
            let bits_b: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let a = PruningMask::from_bits(bits_a);
            let b = PruningMask::from_bits(bits_b);
            let pa: BTreeSet<usize> =
                a.bits().iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
            let pb: BTreeSet<usize> =
                b.bits().iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
            let inter = pa.intersection(&pb).count();
            prop_assert_eq!(hamming(&a, &b).unwrap(), pa.len() + pb.len() - 2 * inter);
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        }
    }

    #[test]
    fn empty_mask_reports_unit_flops_ratios() {
        let net = toynets::chain_net(80);
        let idx = build_indexing(&net).unwrap();
        let report =
            layer_sparsity_report(&net, &idx, &PruningMask::keep_all(idx.num_units())).unwrap();
        for r in &report {
            assert_eq!(r.flops_ratio, 1.0, "layer {}", r.layer);
            assert_eq!(r.pruned, 0);
        }
    }

    #[test]
    fn per_layer_flops_sum_to_the_total() {
        let net = toynets::toy_resnet(81);
        let idx = build_indexing(&net).unwrap();
        let mut rng = rng_from_seed(5);
        let mask = random_mask(idx.num_units(), idx.num_units() / 3, &mut rng);
        let total_masked: u64 =
            (0..net.len()).map(|i| layer_flops(&net, &idx, Some(&mask), i)).sum();
        assert_eq!(total_masked, flops(&net, &idx, &mask).unwrap());
    }

    #[test]
    fn halving_a_chain_layer_halves_its_flops_term() {
        let net = toynets::chain_net(82);
        let idx = build_indexing(&net).unwrap();
        // Find a conv layer and prune half of its units.
        let (layer, units) = (1..net.len())
            .map(|i| (i, layer_units(&net, &idx, i)))
            .find(|(_, u)| u.len() >= 2)
            .unwrap();
        let mut mask = PruningMask::keep_all(idx.num_units());
        for &u in units.iter().take(units.len() / 2) {
            mask.set_pruned(u, true);
        }
        let report = layer_sparsity_report(&net, &idx, &mask).unwrap();
        let r = &report[layer];
        assert!((r.flops_ratio - 0.5).abs() < 1e-12);
        assert_eq!(r.pruned, units.len() / 2);
    }

    #[test]
    fn full_rates_produce_an_empty_mask() {
        let net = toynets::chain_net(83);
        let idx = build_indexing(&net).unwrap();
        let mask = uniform_magnitude_mask(&net, &idx, 1.0).unwrap();
        assert_eq!(mask.pruned_count(), 0);
    }

    #[test]
    fn magnitude_mask_prunes_the_smallest_norm_unit() {
        let net = toynets::chain_net(84);
        let idx = build_indexing(&net).unwrap();
        let mask = uniform_magnitude_mask(&net, &idx, 0.99).unwrap();
        // Rate 0.99 prunes nothing (ceil rounds up to all units).
        assert_eq!(mask.pruned_count(), 0);
        let mask = uniform_magnitude_mask(&net, &idx, 0.5).unwrap();
        for i in 0..net.len() {
            let units = layer_units(&net, &idx, i);
            if units.is_empty() {
                continue;
            }
            let keep = (0.5 * units.len() as f64).ceil() as usize;
            let kept: Vec<usize> =
                units.iter().copied().filter(|&u| !mask.is_pruned(u)).collect();
            assert_eq!(kept.len(), keep, "layer {i}");
            let min_kept = kept
                .iter()
                .map(|&u| unit_l1(&net, &idx, u).unwrap())
                .fold(f32::INFINITY, f32::min);
            let max_pruned = units
                .iter()
                .filter(|&&u| mask.is_pruned(u))
                .map(|&u| unit_l1(&net, &idx, u).unwrap())
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(min_kept >= max_pruned, "layer {i}: kept {min_kept} < pruned {max_pruned}");
        }
    }

    #[test]
    fn uniform_rate_prunes_the_predicted_count_on_a_chain() {
        let net = toynets::chain_net(85);
        let idx = build_indexing(&net).unwrap();
        for rate in [0.0, 0.25, 0.5, 0.75] {
            let mask = uniform_magnitude_mask(&net, &idx, rate).unwrap();
            let want: usize = (0..net.len())
                .map(|i| {
                    let n = layer_units(&net, &idx, i).len();
                    n - (rate * n as f64).ceil() as usize
                })
                .sum();
            assert_eq!(mask.pruned_count(), want, "rate {rate}");
        }
    }

    #[test]
    fn equal_norm_tie_prunes_the_lower_index() {
        // Build a net by hand with two equal-norm channels in one conv.
        use crate::diff::Tensor;
        use crate::net::{Edge, EdgeKind, LayerKind, LayerSpec, NetworkSpec};
        let mut conv = LayerSpec::new(1, LayerKind::Conv2d, 1, 2).with_kernel(8, 8).prunable(true);
        conv.weights = Some(Tensor::full(&[2, 1, 8, 8], 0.5));
        conv.bias = Some(Tensor::zeros(&[2]));
        let net = NetworkSpec::new(
            vec![
                LayerSpec::new(0, LayerKind::Input, 1, 1),
                conv,
                LayerSpec::new(2, LayerKind::Flatten, 2, 2),
                LayerSpec::new(3, LayerKind::Output, 2, 2),
            ],
            vec![
                Edge::new(0, 1, EdgeKind::Regular),
                Edge::new(1, 2, EdgeKind::Regular),
                Edge::new(2, 3, EdgeKind::Regular),
            ],
            (1, 8, 8),
        )
        .unwrap();
        let idx = build_indexing(&net).unwrap();
        let mask = uniform_magnitude_mask(&net, &idx, 0.5).unwrap();
        let u0 = idx.unit_of(1, 0).unwrap();
        let u1 = idx.unit_of(1, 1).unwrap();
        assert!(mask.is_pruned(u0));
        assert!(!mask.is_pruned(u1));
    }

    #[test]
    fn random_mask_prunes_exactly_k_units() {
        let mut rng = rng_from_seed(6);
        for k in [0, 1, 7, 20] {
            let m = random_mask(20, k, &mut rng);
            assert_eq!(m.pruned_count(), k);
        }
    }
}
