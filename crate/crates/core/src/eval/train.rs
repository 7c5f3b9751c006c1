//! Cross-entropy baseline training for the toy networks.

use crate::diff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::net::{LayerKind, NetworkSpec};

use super::dataset::epoch_order;
use super::forward::forward_on_tape;
use super::{accuracy, Dataset, EvalError};

#[derive(Debug, Clone, Copy)]
pub struct BaselineCfg {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BaselineCfg {
    fn default() -> Self {
        Self { epochs: 8, lr: 2e-3, batch: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

fn gather(ds: &Dataset, indices: &[usize]) -> (Tensor<f32>, Vec<u32>) {
    let s = ds.images.shape();
    let per = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&ds.images.data()[i * per..(i + 1) * per]);
        labels.push(ds.labels[i]);
    }
    (
        Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("sized"),
        labels,
    )
}

/// Trains the conv and linear weights of `net` with Adam on cross-entropy
/// (batch-norm statistics stay frozen) and returns the trained network plus
/// one log entry per epoch. Deterministic for a fixed config.
pub fn train_baseline(
    net: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &BaselineCfg,
) -> Result<(NetworkSpec, Vec<EpochLog>), EvalError> {
    if train.is_empty() || val.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut work = net.clone();
    let trainable: Vec<usize> = (0..work.len())
        .filter(|&i| matches!(work.layer(i).kind, LayerKind::Conv2d | LayerKind::Linear))
        .collect();
    let mut params: Vec<Tensor<f32>> = Vec::with_capacity(trainable.len() * 2);
    for &i in &trainable {
        let spec = work.layer(i);
        let w = spec.weights.clone().ok_or(EvalError::MissingWeights { layer: i })?;
        let b = spec
            .bias
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&[spec.out_channels]));
        params.push(w);
        params.push(b);
    }
    let mut adam = AdamState::new(
        &params.iter().collect::<Vec<_>>(),
        AdamConfig::with_lr(cfg.lr),
    );

    let idx = crate::net::build_indexing(&work)?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let (images, labels) = gather(train, chunk);
            let tape: Tape<f32> = Tape::new();
            let input = tape.constant(images);
            let leaves: Vec<crate::diff::Var> =
                params.iter().map(|p| tape.leaf(p.clone())).collect();
            let fw = forward_on_tape(&tape, &work, input, None, |layer| {
                trainable
                    .iter()
                    .position(|&t| t == layer)
                    .map(|k| (leaves[2 * k], leaves[2 * k + 1]))
            })?;
            let loss = tape.cross_entropy_mean(fw.logits, &labels)?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(EvalError::Divergence { epoch, loss: loss_val });
            }
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
            let mut grads = tape.backward(loss)?;
            let gvec: Vec<Tensor<f32>> = leaves
                .iter()
                .zip(&params)
                .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
                .collect();
            let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
            adam_step(&mut adam, &mut refs, &gvec)?;
        }
        for (k, &i) in trainable.iter().enumerate() {
            let spec = work.layer_mut(i);
            spec.weights = Some(params[2 * k].clone());
            spec.bias = Some(params[2 * k + 1].clone());
        }
        let rep = accuracy(&work, &idx, None, val, 64)?;
        logs.push(EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_acc: rep.top1,
        });
    }
    Ok((work, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{stratified_split, synth_dataset};
    use crate::toynets;

    #[test]
    fn baseline_learns_the_shapes() {
        let ds = synth_dataset(17, 24, 1, 16);
        let (train, val) = stratified_split(&ds, 0.8);
                let net = toynets::chain_net(40);
        let cfg = BaselineCfg { epochs: 5, ..Default::default() };
        let (trained, logs) = train_baseline(&net, &train, &val, &cfg).unwrap();
        assert_eq!(logs.len(), 5);
        assert!(
            logs.last().unwrap().train_loss < logs[0].train_loss,
            "loss did not decrease: {logs:?}"
        );
        assert!(
            logs.last().unwrap().val_acc >= 0.8,
            "val accuracy too low: {logs:?}"
        );
        // Original spec untouched, trained copy differs.
        let w0 = net.layer(1).weights.as_ref().unwrap();
        let w1 = trained.layer(1).weights.as_ref().unwrap();
        assert_ne!(w0.data(), w1.data());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_dataset(21, 12, 1, 16);
        let (train, val) = stratified_split(&ds, 0.8);
                let net = toynets::bn_chain_net(41);
        let cfg = BaselineCfg { epochs: 2, ..Default::default() };
        let (a, la) = train_baseline(&net, &train, &val, &cfg).unwrap();
        let (b, lb) = train_baseline(&net, &train, &val, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(
            a.layer(1).weights.as_ref().unwrap().data(),
            b.layer(1).weights.as_ref().unwrap().data()
        );
    }
}
