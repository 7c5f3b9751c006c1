//! Dataset synthesis, masked network evaluation and baseline training.

mod dataset;
mod forward;
mod oracle;
mod train;

pub use dataset::{epoch_order, stratified_split, synth_dataset, SYNTH_CLASSES};
pub use forward::{accuracy, forward, forward_on_tape, layer_activation_stats, AccuracyReport, ForwardVars};
pub use oracle::{BuiltinOracle, EvalOracle, ExternalOracle, OracleError};
pub use train::{train_baseline, BaselineCfg, EpochLog};

use thiserror::Error;

use crate::diff::{DiffError, Tensor};
use crate::net::NetError;

/// An in-memory labeled image set, `[N,C,H,W]` with one u32 label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copies samples `range` into a batch tensor plus its labels.
    pub fn batch(&self, range: std::ops::Range<usize>) -> (Tensor<f32>, &[u32]) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let data = self.images.data()[range.start * per..range.end * per].to_vec();
        let t = Tensor::new(vec![range.len(), s[1], s[2], s[3]], data).expect("sized");
        (t, &self.labels[range])
    }

    /// New dataset from a subset of sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("sized"),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all, when fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let indices: Vec<usize> = (0..self.len().min(n)).collect();
        self.select(&indices)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("layer {layer} has no weights; cannot evaluate")]
    MissingWeights { layer: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("input shape {got:?} does not match network resolution {want:?}")]
    InputShape { got: Vec<usize>, want: (usize, usize, usize) },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
}
