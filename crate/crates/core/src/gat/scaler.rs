//! Column-wise standardization of observation features.
//!
//! Node feature columns mix codes, channel counts, ratios and l1 norms with
//! very different ranges; the encoder trains poorly on raw values. The
//! scaler is fitted once per run on a probe corpus of observations and then
//! frozen, so identical configs see identical inputs.

use crate::diff::{Real, Tensor};
use crate::net::GraphObservation;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationScaler {
    pub node_mean: Vec<f32>,
    pub node_std: Vec<f32>,
    pub edge_mean: Vec<f32>,
    pub edge_std: Vec<f32>,
}

fn column_stats(rows: usize, cols: usize, data: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c] as f64;
        }
    }
    let n = rows.max(1) as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = data[r * cols + c] as f64 - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&v| {
            let s = (v / n).sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s as f32
            }
        })
        .collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

impl ObservationScaler {
    /// No-op scaler (zero mean, unit std).
    pub fn identity(node_dim: usize) -> Self {
        Self {
            node_mean: vec![0.0; node_dim],
            node_std: vec![1.0; node_dim],
            edge_mean: vec![0.0; 4],
            edge_std: vec![1.0; 4],
        }
    }

    /// Column mean/std over all node rows and edge rows of the corpus.
    /// Near-constant columns keep std 1 so they are only centered.
    pub fn fit(corpus: &[GraphObservation]) -> Self {
        assert!(!corpus.is_empty(), "scaler needs at least one observation");
        let nd = corpus[0].node_dim();
        let ed = corpus[0].edge_features.shape()[1];
        let mut node_rows = Vec::new();
        let mut edge_rows = Vec::new();
        let mut n_nodes = 0;
        let mut n_edges = 0;
        for obs in corpus {
            node_rows.extend_from_slice(obs.node_features.data());
            edge_rows.extend_from_slice(obs.edge_features.data());
            n_nodes += obs.num_nodes();
            n_edges += obs.edge_index.len();
        }
        let (node_mean, node_std) = column_stats(n_nodes, nd, &node_rows);
        let (edge_mean, edge_std) = column_stats(n_edges, ed, &edge_rows);
        Self { node_mean, node_std, edge_mean, edge_std }
    }

    pub fn node_dim(&self) -> usize {
        self.node_mean.len()
    }

    /// Standardized copies of the observation's feature matrices.
    pub fn transform<T: Real>(&self, obs: &GraphObservation) -> (Tensor<T>, Tensor<T>) {
        let nd = self.node_mean.len();
        assert_eq!(obs.node_dim(), nd, "observation width does not match scaler");
        let scale = |data: &[f32], mean: &[f32], std: &[f32]| -> Vec<T> {
            let cols = mean.len();
            data.iter()
                .enumerate()
                .map(|(i, &v)| T::from_f64(((v - mean[i % cols]) / std[i % cols]) as f64))
                .collect()
        };
        let nodes = Tensor::new(
            obs.node_features.shape().to_vec(),
            scale(obs.node_features.data(), &self.node_mean, &self.node_std),
        )
        .expect("sized");
        let edges = Tensor::new(
            obs.edge_features.shape().to_vec(),
            scale(obs.edge_features.data(), &self.edge_mean, &self.edge_std),
        )
        .expect("sized");
        (nodes, edges)
    }

    /// Serializable view, four `[d]` tensors under the given prefix.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let t = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec()).expect("sized");
        vec![
            (format!("{prefix}.node_mean"), t(&self.node_mean)),
            (format!("{prefix}.node_std"), t(&self.node_std)),
            (format!("{prefix}.edge_mean"), t(&self.edge_mean)),
            (format!("{prefix}.edge_std"), t(&self.edge_std)),
        ]
    }

    pub fn from_tensors(
        prefix: &str,
        tensors: &[(String, Tensor<f32>)],
    ) -> Option<ObservationScaler> {
        let find = |suffix: &str| -> Option<Vec<f32>> {
            tensors
                .iter()
                .find(|(n, _)| *n == format!("{prefix}.{suffix}"))
                .map(|(_, t)| t.data().to_vec())
        };
        Some(ObservationScaler {
            node_mean: find("node_mean")?,
            node_std: find("node_std")?,
            edge_mean: find("edge_mean")?,
            edge_std: find("edge_std")?,
        })
    }
}
