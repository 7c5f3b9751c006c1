//! Tape-based network executor with optional channel masking.
//!
//! Pruning is simulated without touching stored weights: after every
//! weight-carrying layer (conv, linear, batch-norm) the activations of
//! pruned channels are multiplied by zero. Pooling, addition and flatten
//! preserve zeros, so downstream layers see exactly what a physically
//! sliced network would produce up to floating-point summation order.

use crate::diff::{Real, Tape, Tensor, Var};
use crate::net::{ChannelIndexing, LayerKind, NetworkSpec, Nonlinearity, PruningMask};

use super::{Dataset, EvalError};

const BN_EPS: f64 = 1e-5;

/// Per-layer output variables of one executed forward pass.
pub struct ForwardVars {
    /// Output of the final layer, `[B, num_classes]`.
    pub logits: Var,
    /// One entry per layer, aligned with `NetworkSpec::layers`.
    pub layer_outputs: Vec<Var>,
}

fn activation<T: Real>(tape: &Tape<T>, v: Var, act: Nonlinearity) -> Var {
    match act {
        Nonlinearity::None => v,
        Nonlinearity::Relu => tape.relu(v),
    }
}

fn keep_floats<T: Real>(keep: &[bool]) -> Vec<T> {
    keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect()
}

fn apply_keep<T: Real>(tape: &Tape<T>, v: Var, keep: &[bool]) -> Result<Var, EvalError> {
    if keep.iter().all(|&k| k) {
        return Ok(v);
    }
    let shape = tape.shape(v);
    if shape.len() == 4 {
        Ok(tape.mask_channels(v, &keep_floats::<T>(keep))?)
    } else {
        let b = shape[0];
        let row = keep_floats::<T>(keep);
        let data: Vec<T> = (0..b).flat_map(|_| row.iter().copied()).collect();
        let m = tape.constant(Tensor::new(shape, data)?);
        Ok(tape.mul(v, m)?)
    }
}

fn const_weight<T: Real>(
    tape: &Tape<T>,
    net: &NetworkSpec,
    i: usize,
) -> Result<(Var, Var), EvalError> {
    let spec = net.layer(i);
    let w = spec.weights.as_ref().ok_or(EvalError::MissingWeights { layer: i })?;
    let out = w.shape()[0];
    let b = match &spec.bias {
        Some(b) => b.cast::<T>(),
        None => Tensor::zeros(&[out]),
    };
    Ok((tape.constant(w.cast::<T>()), tape.constant(b)))
}

/// Runs the network on `input` (a var already on `tape`, `[B,C,H,W]`).
///
/// `keeps` holds one keep-flag vector per layer (as produced by
/// [`ChannelIndexing::keep_vec`]); `None` evaluates the unpruned network.
/// `bind` may supply `(weights, bias)` vars for a conv or linear layer so
/// callers can train those tensors; returning `None` falls back to the
/// constants stored in the spec. Batch-norm always uses stored statistics,
/// folded into a per-channel affine.
pub fn forward_on_tape<T: Real>(
    tape: &Tape<T>,
    net: &NetworkSpec,
    input: Var,
    keeps: Option<&[Vec<bool>]>,
    mut bind: impl FnMut(usize) -> Option<(Var, Var)>,
) -> Result<ForwardVars, EvalError> {
    let in_shape = tape.shape(input);
    let res = net.input_resolution();
    if in_shape.len() != 4 || (in_shape[1], in_shape[2], in_shape[3]) != res {
        return Err(EvalError::InputShape { got: in_shape, want: res });
    }
    if let Some(k) = keeps {
        assert_eq!(k.len(), net.len(), "one keep vector per layer");
    }
    let keep_of = |i: usize| keeps.map(|k| k[i].as_slice());

    let mut outs: Vec<Var> = Vec::with_capacity(net.len());
    for i in 0..net.len() {
        let spec = net.layer(i);
        let v = match spec.kind {
            LayerKind::Input => input,
            LayerKind::Conv2d => {
                let x = outs[net.provider(i)];
                let (w, b) = match bind(i) {
                    Some(wb) => wb,
                    None => const_weight(tape, net, i)?,
                };
                let y = tape.conv2d(x, w, b, spec.stride, spec.padding)?;
                let y = activation(tape, y, spec.activation);
                match keep_of(i) {
                    Some(k) => apply_keep(tape, y, k)?,
                    None => y,
                }
            }
            LayerKind::Linear => {
                let x = outs[net.provider(i)];
                let (w, b) = match bind(i) {
                    Some(wb) => wb,
                    None => const_weight(tape, net, i)?,
                };
                let y = tape.linear(x, w, b)?;
                let y = activation(tape, y, spec.activation);
                match keep_of(i) {
                    Some(k) => apply_keep(tape, y, k)?,
                    None => y,
                }
            }
            LayerKind::BatchNorm => {
                let x = outs[net.provider(i)];
                let c = spec.out_channels;
                let ones = Tensor::<f32>::full(&[c], 1.0);
                let zeros = Tensor::<f32>::zeros(&[c]);
                let gamma = spec.weights.as_ref().unwrap_or(&ones);
                let beta = spec.bias.as_ref().unwrap_or(&zeros);
                let mean = spec.bn_mean.as_ref().unwrap_or(&zeros);
                let var = spec.bn_var.as_ref().unwrap_or(&ones);
                let mut scale = Vec::with_capacity(c);
                let mut shift = Vec::with_capacity(c);
                for ch in 0..c {
                    let s = gamma.data()[ch] as f64 / ((var.data()[ch] as f64) + BN_EPS).sqrt();
                    scale.push(T::from_f64(s));
                    shift.push(T::from_f64(beta.data()[ch] as f64 - mean.data()[ch] as f64 * s));
                }
                let y = tape.channel_affine(x, &scale, &shift)?;
                let y = activation(tape, y, spec.activation);
                match keep_of(i) {
                    Some(k) => apply_keep(tape, y, k)?,
                    None => y,
                }
            }
            LayerKind::Pool => {
                let x = outs[net.provider(i)];
                tape.maxpool2d(x, spec.kernel, spec.stride)?
            }
            LayerKind::Add => {
                let ps = net.providers(i);
                let y = tape.add(outs[ps[0]], outs[ps[1]])?;
                activation(tape, y, spec.activation)
            }
            LayerKind::Flatten => {
                let x = outs[net.provider(i)];
                let b = tape.shape(x)[0];
                tape.reshape(x, &[b, spec.out_channels])?
            }
            LayerKind::Output => outs[net.provider(i)],
        };
        outs.push(v);
    }
    Ok(ForwardVars { logits: *outs.last().expect("non-empty network"), layer_outputs: outs })
}

/// Convenience wrapper: evaluates stored weights on a batch and returns the
/// logits tensor. `mask` is translated to per-layer keeps via `idx`.
pub fn forward(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: Option<&PruningMask>,
    images: &Tensor<f32>,
) -> Result<Tensor<f32>, EvalError> {
    let keeps = match mask {
        Some(m) => {
            idx.validate_mask(m)?;
            Some((0..net.len()).map(|i| idx.keep_vec(m, i)).collect::<Vec<_>>())
        }
        None => None,
    };
    let tape: Tape<f32> = Tape::new();
    let input = tape.constant(images.clone());
    let vars = forward_on_tape(&tape, net, input, keeps.as_deref(), |_| None)?;
    Ok(tape.value(vars.logits))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub top1: f64,
    pub correct: usize,
    pub n_samples: usize,
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the (optionally masked) network over a dataset,
/// evaluated in batches of `batch` samples.
pub fn accuracy(
    net: &NetworkSpec,
    idx: &ChannelIndexing,
    mask: Option<&PruningMask>,
    data: &Dataset,
    batch: usize,
) -> Result<AccuracyReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let batch = batch.max(1);
    let classes = data.num_classes as usize;
    let mut correct = 0;
    let mut at = 0;
    while at < data.len() {
        let hi = (at + batch).min(data.len());
        let (images, labels) = data.batch(at..hi);
        let logits = forward(net, idx, mask, &images)?;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            if argmax_row(row) == label as usize {
                correct += 1;
            }
        }
        at = hi;
    }
    Ok(AccuracyReport {
        top1: correct as f64 / data.len() as f64,
        correct,
        n_samples: data.len(),
    })
}

/// Mean absolute activation of each layer's output over a calibration batch,
/// used as the edge feature statistic. One value per layer, `f32`.
pub fn layer_activation_stats(
    net: &NetworkSpec,
    images: &Tensor<f32>,
) -> Result<Vec<f32>, EvalError> {
    let tape: Tape<f32> = Tape::new();
    let input = tape.constant(images.clone());
    let vars = forward_on_tape(&tape, net, input, None, |_| None)?;
    let mut stats = Vec::with_capacity(net.len());
    for &v in &vars.layer_outputs {
        let t = tape.value(v);
        let n = t.len().max(1);
        let mut acc = 0f64;
        for &x in t.data() {
            acc += x.abs() as f64;
        }
        stats.push((acc / n as f64) as f32);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_indexing, Edge, EdgeKind, LayerSpec};
    use crate::toynets;

    fn tiny_input(b: usize) -> Tensor<f32> {
        let (c, h, w) = toynets::INPUT_RESOLUTION;
        let mut data = Vec::with_capacity(b * c * h * w);
        for i in 0..b * c * h * w {
            data.push(((i * 37 % 101) as f32 / 101.0) - 0.5);
        }
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for net in [
            toynets::chain_net(3),
            toynets::toy_resnet(4),
            toynets::shortcut_net(5),
            toynets::chained_res_net(6),
            toynets::bn_chain_net(7),
        ] {
            let idx = build_indexing(&net).unwrap();
            let x = tiny_input(3);
            let a = forward(&net, &idx, None, &x).unwrap();
            let b = forward(&net, &idx, None, &x).unwrap();
            assert_eq!(a.shape(), &[3, toynets::NUM_CLASSES]);
            assert_eq!(a.data(), b.data());
            assert!(a.all_finite());
        }
    }

    #[test]
    fn masking_zeroes_the_right_channels() {
        let net = toynets::chain_net(5);
        let idx = build_indexing(&net).unwrap();
        let mut mask = PruningMask::keep_all(idx.num_units());
        mask.set_pruned(0, true);
        mask.set_pruned(20, true);
        let keeps: Vec<Vec<bool>> =
            (0..net.len()).map(|i| idx.keep_vec(&mask, i)).collect();

        let tape: Tape<f32> = Tape::new();
        let input = tape.constant(tiny_input(2));
        let vars = forward_on_tape(&tape, &net, input, Some(&keeps), |_| None).unwrap();
        for (i, spec) in (0..net.len()).map(|i| (i, net.layer(i))) {
            if !matches!(spec.kind, LayerKind::Conv2d) {
                continue;
            }
            let out = tape.value(vars.layer_outputs[i]);
            let s = out.shape().to_vec();
            let hw = s[2] * s[3];
            let mut kept_mass = 0f32;
            for (ch, &kept) in keeps[i].iter().enumerate() {
                let sum: f32 = (0..s[0])
                    .flat_map(|b| {
                        let base = (b * s[1] + ch) * hw;
                        out.data()[base..base + hw].iter().map(|v| v.abs())
                    })
                    .sum();
                if kept {
                    kept_mass += sum;
                } else {
                    assert_eq!(sum, 0.0, "pruned channel {ch} of layer {i} leaks");
                }
            }
            // Individual kept channels may be silenced by the relu, but the
            // layer as a whole must still carry signal.
            assert!(kept_mass > 0.0, "all kept channels of layer {i} are silent");
        }
    }

    #[test]
    fn logits_of_all_true_mask_match_unmasked() {
        let net = toynets::toy_resnet(6);
        let idx = build_indexing(&net).unwrap();
        let mask = PruningMask::keep_all(idx.num_units());
        let x = tiny_input(4);
        let a = forward(&net, &idx, None, &x).unwrap();
        let b = forward(&net, &idx, Some(&mask), &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn accuracy_counts_argmax_ties_low() {
        // A "network" that maps every input to constant logits: identical
        // scores must resolve to class 0.
        let mut layers = vec![LayerSpec::new(0, LayerKind::Input, 1, 1)];
        let mut w = Tensor::<f32>::zeros(&[3, 1, 16, 16]);
        w.data_mut()[0] = 0.0;
        let mut conv = LayerSpec::new(1, LayerKind::Conv2d, 1, 3).with_kernel(16, 16);
        conv.weights = Some(w);
        conv.bias = Some(Tensor::zeros(&[3]));
        layers.push(conv);
        layers.push(LayerSpec::new(2, LayerKind::Flatten, 3, 3));
        layers.push(LayerSpec::new(3, LayerKind::Output, 3, 3));
        let edges = vec![
            Edge::new(0, 1, EdgeKind::Regular),
            Edge::new(1, 2, EdgeKind::Regular),
            Edge::new(2, 3, EdgeKind::Regular),
        ];
        let net = NetworkSpec::new(layers, edges, (1, 16, 16)).unwrap();
        let idx = build_indexing(&net).unwrap();
        let data = Dataset {
            images: Tensor::full(&[4, 1, 16, 16], 0.5),
            labels: vec![0, 1, 2, 0],
            num_classes: 3,
        };
        let rep = accuracy(&net, &idx, None, &data, 2).unwrap();
        assert_eq!(rep.correct, 2);
        assert!((rep.top1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn activation_stats_cover_every_layer() {
        let net = toynets::bn_chain_net(8);
        let stats = layer_activation_stats(&net, &tiny_input(4)).unwrap();
        assert_eq!(stats.len(), net.len());
        assert!(stats.iter().all(|s| s.is_finite() && *s >= 0.0));
        assert!(stats[1] > 0.0);
    }
}
