use thiserror::Error;

use super::layer::{EdgeKind, LayerKind, LayerSpec, Nonlinearity};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("edge {src}->{dst} violates topological order (cycle or misordered layers)")]
    NonDag { src: usize, dst: usize },
    #[error("layer {layer}: {msg}")]
    BadLayer { layer: usize, msg: String },
    #[error("edge {src}->{dst}: {msg}")]
    BadEdge { src: usize, dst: usize, msg: String },
    #[error("layer {layer}: shape conflict: {msg}")]
    ShapeConflict { layer: usize, msg: String },
    #[error("mask has {got} bits but the network has {expected} decision units")]
    MaskLength { expected: usize, got: usize },
    #[error("mask empties layer {layer}; every layer must keep at least one channel")]
    EmptyLayer { layer: usize },
    #[error("layer {layer}: {op} is not defined for this layer kind")]
    UnsupportedLayer { layer: usize, op: &'static str },
    #[error("layer {layer} has {channels} channels, exceeding padded width {c_max}")]
    PaddingOverflow {
        layer: usize,
        channels: usize,
        c_max: usize,
    },
    #[error("cannot split {units} units into {n} groups")]
    InvalidGroupCount { units: usize, n: usize },
    #[error("invalid argument: {0}")]
    BadArg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn new(src: usize, dst: usize, kind: EdgeKind) -> Self {
        Self { src, dst, kind }
    }
}

/// Inferred output description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOut {
    /// Output channels for spatial layers, classes/features otherwise.
    pub channels: usize,
    /// Spatial extent; `None` once the data is flattened.
    pub hw: Option<(usize, usize)>,
    /// Flat feature count: `channels * h * w` for spatial layers.
    pub features: usize,
}

/// Validated, topologically ordered network DAG.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    edges: Vec<Edge>,
    input_resolution: (usize, usize, usize),
    outs: Vec<LayerOut>,
    preds: Vec<Vec<usize>>,
}

impl NetworkSpec {
    /// Validates structure and infers every layer's output shape.
    ///
    /// Requirements: layers listed in topological order with `id == index`;
    /// every edge points forward; exactly one `Input` (first) and one
    /// `Output` (last); `Add` has in-degree 2 with at least one residual
    /// edge and shape-identical providers; all other non-input layers have
    /// in-degree 1; weights (when present) match declared shapes.
    pub fn new(
        layers: Vec<LayerSpec>,
        edges: Vec<Edge>,
        input_resolution: (usize, usize, usize),
    ) -> Result<Self, NetError> {
        let n = layers.len();
        if n < 2 {
            return Err(NetError::BadArg("network needs at least input and output".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.id != i {
                return Err(NetError::BadLayer {
                    layer: l.id,
                    msg: format!("id must equal position {i} in the topological order"),
                });
            }
        }
        if layers[0].kind != LayerKind::Input {
            return Err(NetError::BadLayer { layer: 0, msg: "first layer must be input".into() });
        }
        if layers[n - 1].kind != LayerKind::Output {
            return Err(NetError::BadLayer {
                layer: n - 1,
                msg: "last layer must be output".into(),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            let input_like = l.kind == LayerKind::Input;
            let output_like = l.kind == LayerKind::Output;
            if (input_like && i != 0) || (output_like && i != n - 1) {
                return Err(NetError::BadLayer {
                    layer: i,
                    msg: "exactly one input (first) and one output (last) allowed".into(),
                });
            }
        }

        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut out_deg = vec![0usize; n];
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(NetError::BadEdge {
                    src: e.src,
                    dst: e.dst,
                    msg: "references unknown layer".into(),
                });
            }
            if e.src >= e.dst {
                return Err(NetError::NonDag { src: e.src, dst: e.dst });
            }
            preds[e.dst].push(e.src);
            out_deg[e.src] += 1;
        }

        for (i, l) in layers.iter().enumerate() {
            let indeg = preds[i].len();
            match l.kind {
                LayerKind::Input => {
                    if indeg != 0 {
                        return Err(NetError::BadLayer { layer: i, msg: "input has providers".into() });
                    }
                }
                LayerKind::Add => {
                    if indeg != 2 {
                        return Err(NetError::BadLayer {
                            layer: i,
                            msg: format!("add needs exactly 2 providers, has {indeg}"),
                        });
                    }
                    let has_residual = edges
                        .iter()
                        .any(|e| e.dst == i && e.kind == EdgeKind::Residual);
                    if !has_residual {
                        return Err(NetError::BadLayer {
                            layer: i,
                            msg: "add requires at least one residual edge".into(),
                        });
                    }
                }
                _ => {
                    if indeg != 1 {
                        return Err(NetError::BadLayer {
                            layer: i,
                            msg: format!("needs exactly 1 provider, has {indeg}"),
                        });
                    }
                }
            }
            if l.kind != LayerKind::Output && out_deg[i] == 0 {
                return Err(NetError::BadLayer { layer: i, msg: "dead end: no consumers".into() });
            }
            if out_deg[n - 1] != 0 {
                return Err(NetError::BadLayer { layer: n - 1, msg: "output has consumers".into() });
            }
            if l.activation == Nonlinearity::Relu
                && !matches!(
                    l.kind,
                    LayerKind::Conv2d | LayerKind::Linear | LayerKind::BatchNorm | LayerKind::Add
                )
            {
                return Err(NetError::BadLayer {
                    layer: i,
                    msg: "activation only allowed on conv/linear/batchnorm/add".into(),
                });
            }
        }

        let outs = infer_shapes(&layers, &preds, input_resolution)?;
        check_weights(&layers, &preds, &outs)?;

        Ok(Self {
            layers,
            edges,
            input_resolution,
            outs,
            preds,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerSpec {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerSpec {
        &mut self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn input_resolution(&self) -> (usize, usize, usize) {
        self.input_resolution
    }

    pub fn out(&self, i: usize) -> LayerOut {
        self.outs[i]
    }

    /// Provider indices of layer `i` (edge order preserved).
    pub fn providers(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    /// The single provider of a non-Add layer.
    pub fn provider(&self, i: usize) -> usize {
        self.preds[i][0]
    }

    /// Largest `out_channels` over channel-producing layers, the default
    /// padded width for observation features.
    pub fn max_channels(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind.produces_channels())
            .map(|l| l.out_channels)
            .max()
            .unwrap_or(0)
    }
}

fn infer_shapes(
    layers: &[LayerSpec],
    preds: &[Vec<usize>],
    input_resolution: (usize, usize, usize),
) -> Result<Vec<LayerOut>, NetError> {
    let (ic, ih, iw) = input_resolution;
    let mut outs: Vec<LayerOut> = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let out = match l.kind {
            LayerKind::Input => {
                if l.out_channels != ic || l.in_channels != ic {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!(
                            "input layer declares {} channels, resolution has {ic}",
                            l.out_channels
                        ),
                    });
                }
                LayerOut { channels: ic, hw: Some((ih, iw)), features: ic * ih * iw }
            }
            LayerKind::Conv2d => {
                let p = outs[preds[i][0]];
                let Some((h, w)) = p.hw else {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: "conv2d needs a spatial provider".into(),
                    });
                };
                if p.channels != l.in_channels {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!("declares {} in channels, provider has {}", l.in_channels, p.channels),
                    });
                }
                let (kh, kw) = l.kernel;
                if kh == 0 || kw == 0 || l.stride.0 == 0 || l.stride.1 == 0 {
                    return Err(NetError::BadLayer { layer: i, msg: "conv kernel/stride must be positive".into() });
                }
                if h + 2 * l.padding.0 < kh || w + 2 * l.padding.1 < kw {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!("kernel {kh}x{kw} exceeds padded input {h}x{w}"),
                    });
                }
                let ho = (h + 2 * l.padding.0 - kh) / l.stride.0 + 1;
                let wo = (w + 2 * l.padding.1 - kw) / l.stride.1 + 1;
                LayerOut {
                    channels: l.out_channels,
                    hw: Some((ho, wo)),
                    features: l.out_channels * ho * wo,
                }
            }
            LayerKind::Linear => {
                let p = outs[preds[i][0]];
                if p.hw.is_some() {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: "linear needs flattened input; insert a flatten layer".into(),
                    });
                }
                if p.features != l.in_channels {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!("declares {} in features, provider has {}", l.in_channels, p.features),
                    });
                }
                LayerOut { channels: l.out_channels, hw: None, features: l.out_channels }
            }
            LayerKind::BatchNorm | LayerKind::Pool => {
                let p = outs[preds[i][0]];
                let Some((h, w)) = p.hw else {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!("{} needs a spatial provider", l.kind.name()),
                    });
                };
                if p.channels != l.in_channels || l.in_channels != l.out_channels {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: "channel counts must match the provider and be preserved".into(),
                    });
                }
                if l.kind == LayerKind::Pool {
                    let (kh, kw) = l.kernel;
                    if kh == 0 || kw == 0 || l.stride.0 == 0 || l.stride.1 == 0 {
                        return Err(NetError::BadLayer { layer: i, msg: "pool kernel/stride must be positive".into() });
                    }
                    if h < kh || w < kw {
                        return Err(NetError::ShapeConflict {
                            layer: i,
                            msg: format!("pool {kh}x{kw} exceeds input {h}x{w}"),
                        });
                    }
                    let ho = (h - kh) / l.stride.0 + 1;
                    let wo = (w - kw) / l.stride.1 + 1;
                    LayerOut { channels: p.channels, hw: Some((ho, wo)), features: p.channels * ho * wo }
                } else {
                    LayerOut { channels: p.channels, hw: Some((h, w)), features: p.channels * h * w }
                }
            }
            LayerKind::Add => {
                let a = outs[preds[i][0]];
                let b = outs[preds[i][1]];
                if a.hw.is_none() || a != b {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!("add providers disagree: {a:?} vs {b:?}"),
                    });
                }
                if l.in_channels != a.channels || l.out_channels != a.channels {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: "add channel counts must match its providers".into(),
                    });
                }
                a
            }
            LayerKind::Flatten => {
                let p = outs[preds[i][0]];
                if p.hw.is_none() {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: "flatten needs a spatial provider".into(),
                    });
                }
                if l.in_channels != p.channels || l.out_channels != p.features {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!(
                            "flatten must declare in={} out={}",
                            p.channels, p.features
                        ),
                    });
                }
                LayerOut { channels: p.features, hw: None, features: p.features }
            }
            LayerKind::Output => {
                let p = outs[preds[i][0]];
                LayerOut { channels: p.features, hw: p.hw, features: p.features }
            }
        };
        outs.push(out);
    }
    Ok(outs)
}

fn check_weights(
    layers: &[LayerSpec],
    preds: &[Vec<usize>],
    outs: &[LayerOut],
) -> Result<(), NetError> {
    for (i, l) in layers.iter().enumerate() {
        let want_w: Option<Vec<usize>> = match l.kind {
            LayerKind::Conv2d => Some(vec![l.out_channels, l.in_channels, l.kernel.0, l.kernel.1]),
            LayerKind::Linear => Some(vec![l.out_channels, l.in_channels]),
            LayerKind::BatchNorm => Some(vec![l.out_channels]),
            _ => None,
        };
        match (&l.weights, want_w) {
            (Some(w), Some(shape)) => {
                if w.shape() != shape.as_slice() {
                    return Err(NetError::ShapeConflict {
                        layer: i,
                        msg: format!("weights {:?}, expected {:?}", w.shape(), shape),
                    });
                }
            }
            (Some(_), None) => {
                return Err(NetError::BadLayer { layer: i, msg: "layer kind takes no weights".into() })
            }
            _ => {}
        }
        if let Some(b) = &l.bias {
            if b.shape() != [l.out_channels] {
                return Err(NetError::ShapeConflict {
                    layer: i,
                    msg: format!("bias {:?}, expected [{}]", b.shape(), l.out_channels),
                });
            }
        }
        if l.kind == LayerKind::BatchNorm {
            for (name, t) in [("running mean", &l.bn_mean), ("running var", &l.bn_var)] {
                if let Some(t) = t {
                    if t.shape() != [l.out_channels] {
                        return Err(NetError::ShapeConflict {
                            layer: i,
                            msg: format!("{name} {:?}, expected [{}]", t.shape(), l.out_channels),
                        });
                    }
                }
            }
            if let Some(v) = &l.bn_var {
                if v.data().iter().any(|&x| x <= 0.0) {
                    return Err(NetError::BadLayer {
                        layer: i,
                        msg: "running variance must be strictly positive".into(),
                    });
                }
            }
        } else if l.bn_mean.is_some() || l.bn_var.is_some() {
            return Err(NetError::BadLayer {
                layer: i,
                msg: "running statistics only valid on batchnorm".into(),
            });
        }
        let _ = (preds, outs);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layer::{LayerKind as K, LayerSpec as L};

    fn tiny_chain() -> (Vec<L>, Vec<Edge>) {
        let layers = vec![
            L::new(0, K::Input, 1, 1),
            L::new(1, K::Conv2d, 1, 4).with_kernel(3, 3).with_padding(1, 1).prunable(true),
            L::new(2, K::Flatten, 4, 4 * 8 * 8),
            L::new(3, K::Linear, 4 * 8 * 8, 10),
            L::new(4, K::Output, 10, 10),
        ];
        let edges = vec![
            Edge::new(0, 1, EdgeKind::Regular),
            Edge::new(1, 2, EdgeKind::Regular),
            Edge::new(2, 3, EdgeKind::Regular),
            Edge::new(3, 4, EdgeKind::Regular),
        ];
        (layers, edges)
    }

    #[test]
    fn valid_chain_infers_shapes() {
        let (layers, edges) = tiny_chain();
        let net = NetworkSpec::new(layers, edges, (1, 8, 8)).unwrap();
        assert_eq!(net.out(1), LayerOut { channels: 4, hw: Some((8, 8)), features: 256 });
        assert_eq!(net.out(3), LayerOut { channels: 10, hw: None, features: 10 });
        assert_eq!(net.max_channels(), 10);
    }

    #[test]
    fn backward_edge_is_a_cycle_error() {
        let (layers, mut edges) = tiny_chain();
        edges[1] = Edge::new(2, 1, EdgeKind::Regular);
        match NetworkSpec::new(layers, edges, (1, 8, 8)) {
            Err(NetError::NonDag { src: 2, dst: 1 }) => {}
            other => panic!("expected NonDag, got {other:?}"),
        }
    }

    #[test]
    fn add_requires_residual_edge() {
        let layers = vec![
            L::new(0, K::Input, 1, 1),
            L::new(1, K::Conv2d, 1, 4).with_kernel(3, 3).with_padding(1, 1).prunable(true),
            L::new(2, K::Conv2d, 4, 4).with_kernel(3, 3).with_padding(1, 1).prunable(true),
            L::new(3, K::Add, 4, 4),
            L::new(4, K::Flatten, 4, 4 * 8 * 8),
            L::new(5, K::Linear, 4 * 8 * 8, 10),
            L::new(6, K::Output, 10, 10),
        ];
        let mk = |kind| {
            vec![
                Edge::new(0, 1, EdgeKind::Regular),
                Edge::new(1, 2, EdgeKind::Regular),
                Edge::new(1, 3, kind),
                Edge::new(2, 3, EdgeKind::Regular),
                Edge::new(3, 4, EdgeKind::Regular),
                Edge::new(4, 5, EdgeKind::Regular),
                Edge::new(5, 6, EdgeKind::Regular),
            ]
        };
        assert!(NetworkSpec::new(layers.clone(), mk(EdgeKind::Residual), (1, 8, 8)).is_ok());
        match NetworkSpec::new(layers, mk(EdgeKind::Regular), (1, 8, 8)) {
            Err(NetError::BadLayer { layer: 3, .. }) => {}
            other => panic!("expected BadLayer(3), got {other:?}"),
        }
    }

    #[test]
    fn linear_needs_explicit_flatten() {
        let layers = vec![
            L::new(0, K::Input, 1, 1),
            L::new(1, K::Conv2d, 1, 4).with_kernel(3, 3).with_padding(1, 1),
            L::new(2, K::Linear, 256, 10),
            L::new(3, K::Output, 10, 10),
        ];
        let edges = vec![
            Edge::new(0, 1, EdgeKind::Regular),
            Edge::new(1, 2, EdgeKind::Regular),
            Edge::new(2, 3, EdgeKind::Regular),
        ];
        match NetworkSpec::new(layers, edges, (1, 8, 8)) {
            Err(NetError::ShapeConflict { layer: 2, .. }) => {}
            other => panic!("expected ShapeConflict(2), got {other:?}"),
        }
    }

    #[test]
    fn weight_shape_mismatch_is_rejected() {
        let (mut layers, edges) = tiny_chain();
        layers[1].weights = Some(crate::diff::Tensor::zeros(&[4, 1, 2, 2]));
        assert!(matches!(
            NetworkSpec::new(layers, edges, (1, 8, 8)),
            Err(NetError::ShapeConflict { layer: 1, .. })
        ));
    }
}
