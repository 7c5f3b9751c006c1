//! Graph attention encoder over layer-graph observations.
//!
//! Each round updates node features along directed edges (information flows
//! with execution order; every node also attends to itself):
//!
//! ```text
//! score(i,j) = aᵀ LeakyReLU(Θ_s x_i + Θ_t x_j + Θ_e e_ij)
//! α_i·       = softmax over {score(i,j) : j ∈ N(i)} ∪ {score(i,i)}
//! x'_i       = α_ii Θ_s x_i + Σ_j α_ij Θ_t x_j
//! ```
//!
//! The self-loop has no edge feature (zero vector). After the configured
//! rounds, a gated sum pools node embeddings into one graph embedding:
//! `e = Σ_n softmax_n(gate(x_n)) ⊙ proj(x_n)`.

mod scaler;

pub use scaler::ObservationScaler;

use rand::Rng;

use crate::diff::{
    orthogonal_init, Activation, DiffError, Mlp, MlpVars, Real, Tape, Tensor, Var,
};
use crate::net::GraphObservation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatConfig {
    pub rounds: usize,
    pub hidden: usize,
    pub embed: usize,
    pub leaky_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self { rounds: 3, hidden: 128, embed: 128, leaky_slope: 0.2 }
    }
}

/// One message-passing round. Weights are stored `[out, in]` and applied as
/// `x · Θᵀ`, matching the rest of the library.
#[derive(Debug, Clone)]
pub struct GatLayerParams<T> {
    pub theta_s: Tensor<T>,
    pub theta_t: Tensor<T>,
    pub theta_e: Tensor<T>,
    /// Attention vector, stored as a `[1, out]` row.
    pub attn: Tensor<T>,
    pub leaky_slope: f64,
}

impl<T: Real> GatLayerParams<T> {
    pub fn init(
        d_in: usize,
        d_out: usize,
        d_edge: usize,
        leaky_slope: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            theta_s: orthogonal_init(d_out, d_in, std::f64::consts::SQRT_2, rng)?,
            theta_t: orthogonal_init(d_out, d_in, std::f64::consts::SQRT_2, rng)?,
            theta_e: orthogonal_init(d_out, d_edge, 1.0, rng)?,
            attn: orthogonal_init(1, d_out, 1.0, rng)?,
            leaky_slope,
        })
    }

    pub fn d_in(&self) -> usize {
        self.theta_s.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.theta_s.shape()[0]
    }
}

/// Full encoder: message-passing rounds plus the pooling heads.
#[derive(Debug, Clone)]
pub struct GatEncoderParams<T> {
    pub layers: Vec<GatLayerParams<T>>,
    pub pool_gate: Mlp<T>,
    pub pool_proj: Mlp<T>,
}

pub const EDGE_FEATURES: usize = 4;

impl<T: Real> GatEncoderParams<T> {
    pub fn init(node_dim: usize, cfg: &GatConfig, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let mut layers = Vec::with_capacity(cfg.rounds);
        let mut d = node_dim;
        for _ in 0..cfg.rounds {
            layers.push(GatLayerParams::init(d, cfg.hidden, EDGE_FEATURES, cfg.leaky_slope, rng)?);
            d = cfg.hidden;
        }
        let pool_gate = Mlp::orthogonal(
            &[cfg.hidden, cfg.hidden, 1],
            Activation::Tanh,
            Activation::Linear,
            1.0,
            rng,
        )?;
        let pool_proj = Mlp::orthogonal(
            &[cfg.hidden, cfg.embed],
            Activation::Tanh,
            Activation::Linear,
            1.0,
            rng,
        )?;
        Ok(Self { layers, pool_gate, pool_proj })
    }

    pub fn node_dim(&self) -> usize {
        self.layers.first().map(|l| l.d_in()).unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.pool_proj.out_dim()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.theta_s);
            out.push(&mut l.theta_t);
            out.push(&mut l.theta_e);
            out.push(&mut l.attn);
        }
        out.extend(self.pool_gate.params_mut());
        out.extend(self.pool_proj.params_mut());
        out
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (r, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.r{r}.theta_s"), &l.theta_s));
            out.push((format!("{prefix}.r{r}.theta_t"), &l.theta_t));
            out.push((format!("{prefix}.r{r}.theta_e"), &l.theta_e));
            out.push((format!("{prefix}.r{r}.attn"), &l.attn));
        }
        out.extend(self.pool_gate.named(&format!("{prefix}.gate")));
        out.extend(self.pool_proj.named(&format!("{prefix}.proj")));
        out
    }

    pub fn cast<U: Real>(&self) -> GatEncoderParams<U> {
        GatEncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| GatLayerParams {
                    theta_s: l.theta_s.cast(),
                    theta_t: l.theta_t.cast(),
                    theta_e: l.theta_e.cast(),
                    attn: l.attn.cast(),
                    leaky_slope: l.leaky_slope,
                })
                .collect(),
            pool_gate: self.pool_gate.cast(),
            pool_proj: self.pool_proj.cast(),
        }
    }

    pub fn bind(&self, tape: &Tape<T>) -> GatVars {
        GatVars {
            layers: self
                .layers
                .iter()
                .map(|l| GatLayerVars {
                    theta_s: tape.leaf(l.theta_s.clone()),
                    theta_t: tape.leaf(l.theta_t.clone()),
                    theta_e: tape.leaf(l.theta_e.clone()),
                    attn: tape.leaf(l.attn.clone()),
                    leaky_slope: l.leaky_slope,
                })
                .collect(),
            pool_gate: self.pool_gate.bind(tape),
            pool_proj: self.pool_proj.bind(tape),
        }
    }
}

pub struct GatLayerVars {
    pub theta_s: Var,
    pub theta_t: Var,
    pub theta_e: Var,
    pub attn: Var,
    pub leaky_slope: f64,
}

pub struct GatVars {
    pub layers: Vec<GatLayerVars>,
    pub pool_gate: MlpVars,
    pub pool_proj: MlpVars,
}

impl GatVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.theta_s, l.theta_t, l.theta_e, l.attn]);
        }
        out.extend(self.pool_gate.all_vars());
        out.extend(self.pool_proj.all_vars());
        out
    }
}

/// Per-round attention values, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct AttentionRecord<T> {
    /// `(dst, src)` per attention entry; the final `N` entries are the
    /// self-loops `(i, i)`.
    pub pairs: Vec<(usize, usize)>,
    pub alpha: Vec<T>,
}

/// Everything produced by one encoder pass.
pub struct EncodeOut<T> {
    /// `[1, d_emb]` pooled graph embedding.
    pub graph: Var,
    /// `[N, hidden]` node embeddings after the final round.
    pub nodes: Var,
    pub attention: Vec<AttentionRecord<T>>,
}

/// Fixed per-observation index data shared by every round.
struct EdgeLayout {
    src: Vec<usize>,
    dst: Vec<usize>,
    /// dst of the augmented list (edges then self-loops), the softmax segments.
    seg: Vec<usize>,
    n: usize,
}

fn layout(obs_edges: &[(usize, usize)], n: usize) -> EdgeLayout {
    let src: Vec<usize> = obs_edges.iter().map(|&(s, _)| s).collect();
    let dst: Vec<usize> = obs_edges.iter().map(|&(_, d)| d).collect();
    let mut seg = dst.clone();
    seg.extend(0..n);
    EdgeLayout { src, dst, seg, n }
}

/// One message-passing round on the tape. `x` is `[N, d_in]`, `edge_feats`
/// `[E, d_e]` (a var so the autoencoder can reconstruct through it).
pub fn gat_layer_forward<T: Real>(
    tape: &Tape<T>,
    layer: &GatLayerVars,
    x: Var,
    edge_feats: Var,
    edges: &[(usize, usize)],
) -> Result<(Var, AttentionRecord<T>), DiffError> {
    let n = tape.shape(x)[0];
    let lay = layout(edges, n);

    let xs = tape.matmul_nt(x, layer.theta_s)?;
    let xt = tape.matmul_nt(x, layer.theta_t)?;

    // Augmented score list: one row per edge, then one per self-loop.
    let scores_in = if lay.src.is_empty() {
        tape.add(xs, xt)?
    } else {
        let e_term = tape.matmul_nt(edge_feats, layer.theta_e)?;
        let per_edge = tape.add(
            tape.add(tape.gather_rows(xs, &lay.dst)?, tape.gather_rows(xt, &lay.src)?)?,
            e_term,
        )?;
        tape.concat_rows(per_edge, tape.add(xs, xt)?)?
    };
    let act = tape.leaky_relu(scores_in, layer.leaky_slope);
    let scores = tape.matmul_nt(act, layer.attn)?;
    let alpha = tape.segment_softmax(scores, &lay.seg, lay.n)?;

    // Messages: Θ_t x_j along edges, Θ_s x_i on the self-loop.
    let msgs = if lay.src.is_empty() {
        xs
    } else {
        tape.concat_rows(tape.gather_rows(xt, &lay.src)?, xs)?
    };
    let weighted = tape.mul_col(msgs, alpha)?;
    let out = tape.scatter_add_rows(weighted, &lay.seg, lay.n)?;

    let mut pairs: Vec<(usize, usize)> = lay.dst.iter().zip(&lay.src).map(|(&d, &s)| (d, s)).collect();
    pairs.extend((0..n).map(|i| (i, i)));
    let record = AttentionRecord { pairs, alpha: tape.value(alpha).into_data() };
    Ok((out, record))
}

/// Full encoder pass over an observation already lifted onto the tape.
pub fn encode_on_tape<T: Real>(
    tape: &Tape<T>,
    vars: &GatVars,
    node_feats: Var,
    edge_feats: Var,
    edges: &[(usize, usize)],
) -> Result<EncodeOut<T>, DiffError> {
    let mut x = node_feats;
    let mut attention = Vec::with_capacity(vars.layers.len());
    for (r, layer) in vars.layers.iter().enumerate() {
        let (next, rec) = gat_layer_forward(tape, layer, x, edge_feats, edges)?;
        attention.push(rec);
        x = if r + 1 < vars.layers.len() {
            tape.leaky_relu(next, layer.leaky_slope)
        } else {
            next
        };
    }
    // Gated pooling: softmax over nodes, weighted sum of projections.
    let n = tape.shape(x)[0];
    let gate = vars.pool_gate.forward(tape, x)?;
    let seg: Vec<usize> = vec![0; n];
    let weights = tape.segment_softmax(gate, &seg, 1)?;
    let proj = vars.pool_proj.forward(tape, x)?;
    let graph = tape.sum_rows(tape.mul_col(proj, weights)?)?;
    Ok(EncodeOut { graph, nodes: x, attention })
}

/// Concrete (tape-free) result of encoding one observation.
#[derive(Debug, Clone)]
pub struct EncodedValues<T> {
    pub graph: Tensor<T>,
    pub nodes: Tensor<T>,
    pub attention: Vec<AttentionRecord<T>>,
}

/// Scales an observation and runs the encoder on a throwaway tape;
/// convenience for rollouts and diagnostics where no gradient is needed.
pub fn encode_observation<T: Real>(
    params: &GatEncoderParams<T>,
    scaler: &ObservationScaler,
    obs: &GraphObservation,
) -> Result<EncodedValues<T>, DiffError> {
    let tape: Tape<T> = Tape::new();
    let (nodes, edges) = scaler.transform::<T>(obs);
    let vars = params.bind(&tape);
    let nv = tape.constant(nodes);
    let ev = tape.constant(edges);
    let out = encode_on_tape(&tape, &vars, nv, ev, &obs.edge_index)?;
    Ok(EncodedValues {
        graph: tape.value(out.graph),
        nodes: tape.value(out.nodes),
        attention: out.attention,
    })
}

/// Attention coefficients of one node in one round, computed directly (no
/// tape): `(src, α)` pairs over in-neighbors plus the self-loop, which is
/// listed last.
pub fn attention_coefficients<T: Real>(
    layer: &GatLayerParams<T>,
    node_feats: &Tensor<T>,
    edge_feats: &Tensor<T>,
    edges: &[(usize, usize)],
    node: usize,
) -> Vec<(usize, T)> {
    let d_in = layer.d_in();
    let d_out = layer.d_out();
    let nf = node_feats.data();
    let ef = edge_feats.data();
    let d_e = layer.theta_e.shape()[1];

    let apply = |w: &Tensor<T>, row: &[T]| -> Vec<T> {
        let wd = w.data();
        let cols = w.shape()[1];
        (0..w.shape()[0])
            .map(|o| {
                let mut acc = T::zero();
                for (c, &v) in row.iter().enumerate() {
                    acc += wd[o * cols + c] * v;
                }
                acc
            })
            .collect()
    };

    let xi = &nf[node * d_in..(node + 1) * d_in];
    let si = apply(&layer.theta_s, xi);
    let score_of = |tj: &[T], e: Option<&[T]>| -> T {
        let et = e.map(|row| apply(&layer.theta_e, row));
        let mut acc = T::zero();
        for o in 0..d_out {
            let mut z = si[o] + tj[o];
            if let Some(ref et) = et {
                z += et[o];
            }
            if z < T::zero() {
                z = z * T::from_f64(layer.leaky_slope);
            }
            acc += layer.attn.data()[o] * z;
        }
        acc
    };

    let mut entries: Vec<(usize, T)> = Vec::new();
    for (k, &(s, d)) in edges.iter().enumerate() {
        if d != node {
            continue;
        }
        let xj = &nf[s * d_in..(s + 1) * d_in];
        let tj = apply(&layer.theta_t, xj);
        entries.push((s, score_of(&tj, Some(&ef[k * d_e..(k + 1) * d_e]))));
    }
    let ti = apply(&layer.theta_t, xi);
    entries.push((node, score_of(&ti, None)));

    let max = entries
        .iter()
        .map(|&(_, v)| v)
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut total = T::zero();
    for e in &mut entries {
        e.1 = (e.1 - max).exp();
        total += e.1;
    }
    for e in &mut entries {
        e.1 /= total;
    }
    entries
}
