use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::tensor::{DiffError, Tensor};
use super::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
}

struct Inner<T: Real> {
    vals: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every tape variable it reaches.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros if the loss does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Wengert-list tape recording a computation for reverse-mode differentiation.
///
/// Shapes are validated when an operation is recorded, so the backward sweep
/// itself cannot fail. The tape is single-threaded by design; training code
/// builds one tape per optimization step and drops it afterwards.
pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                vals: Vec::new(),
                nodes: Vec::new(),
            }),
        }
    }

    /// Records a differentiable leaf (parameters, inputs under test).
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(Vec::new(), t, None)
    }

    /// Records a non-trained input; gradients may still flow through it.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.inner.borrow().vals[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().vals[v.0].shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: Vec<usize>, val: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(val);
        inner.nodes.push(Node { parents, back });
        Var(inner.nodes.len() - 1)
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(&Tensor<T>) -> Tensor<T>,
        back: BackFn<T>,
    ) -> Var {
        let out = {
            let inner = self.inner.borrow();
            f(&inner.vals[a.0])
        };
        self.push(vec![a.0], out, Some(back))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate in recording
    /// order, so results are bit-stable across identical runs.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        if inner.vals[loss.0].len() != 1 {
            return Err(DiffError::NonScalarLoss {
                len: inner.vals[loss.0].len(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(inner.vals[loss.0].shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &inner.nodes[id];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[id].clone() else { continue };
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &inner.vals[p]).collect();
            let pgrads = back(&g, &parent_vals, &inner.vals[id]);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p] {
                    Some(acc) => acc.accumulate(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- shape helpers ----

    fn want_rank(&self, v: Var, rank: usize, op: &'static str) -> Result<(), DiffError> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(DiffError::Rank {
                op,
                expected: rank,
                shape: s,
            });
        }
        Ok(())
    }

    fn want_same(&self, a: Var, b: Var, op: &'static str) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    // ---- linear algebra ----

    /// `[m,k] x [k,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_rank(a, 2, "matmul")?;
        self.want_rank(b, 2, "matmul")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let out = {
            let inner = self.inner.borrow();
            kernels::matmul(&inner.vals[a.0], &inner.vals[b.0])
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(|g, p, _| {
                vec![kernels::matmul_nt(g, p[1]), kernels::matmul_tn(p[0], g)]
            })),
        ))
    }

    /// `[m,k] x [n,k]^T`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_rank(a, 2, "matmul_nt")?;
        self.want_rank(b, 2, "matmul_nt")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(DiffError::ShapeMismatch { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let out = {
            let inner = self.inner.borrow();
            kernels::matmul_nt(&inner.vals[a.0], &inner.vals[b.0])
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(|g, p, _| {
                vec![kernels::matmul(g, p[1]), kernels::matmul_tn(g, p[0])]
            })),
        ))
    }

    /// Dense layer `x [m,k] . w [n,k]^T + b [n]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        self.want_rank(x, 2, "linear")?;
        self.want_rank(w, 2, "linear")?;
        self.want_rank(b, 1, "linear")?;
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "linear", lhs: sx, rhs: sw });
        }
        let out = {
            let inner = self.inner.borrow();
            let mut y = kernels::matmul_nt(&inner.vals[x.0], &inner.vals[w.0]);
            let n = sw[0];
            let bd = inner.vals[b.0].data().to_vec();
            for row in y.data_mut().chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
            y
        };
        Ok(self.push(
            vec![x.0, w.0, b.0],
            out,
            Some(Box::new(move |g, p, _| {
                let n = g.shape()[1];
                let mut gb = Tensor::zeros(&[n]);
                for row in g.data().chunks_exact(n) {
                    for (acc, &gv) in gb.data_mut().iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                vec![kernels::matmul(g, p[1]), kernels::matmul_tn(g, p[0]), gb]
            })),
        ))
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_same(a, b, "add")?;
        let out = {
            let inner = self.inner.borrow();
            inner.vals[a.0].zip_map(&inner.vals[b.0], "add", |x, y| x + y)?
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_same(a, b, "sub")?;
        let out = {
            let inner = self.inner.borrow();
            inner.vals[a.0].zip_map(&inner.vals[b.0], "sub", |x, y| x - y)?
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|x| -x)])),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_same(a, b, "mul")?;
        let out = {
            let inner = self.inner.borrow();
            inner.vals[a.0].zip_map(&inner.vals[b.0], "mul", |x, y| x * y)?
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(|g, p, _| {
                vec![
                    g.zip_map(p[1], "mul_back", |gv, y| gv * y).expect("shape checked"),
                    g.zip_map(p[0], "mul_back", |gv, x| gv * x).expect("shape checked"),
                ]
            })),
        ))
    }

    pub fn scale_const(&self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        self.unary(
            a,
            |x| x.map(|v| v * cv),
            Box::new(move |g, _, _| vec![g.map(|gv| gv * cv)]),
        )
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        self.unary(a, |x| x.map(|v| v + cv), Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Box::new(|g, p, _| {
                vec![g
                    .zip_map(p[0], "relu_back", |gv, x| if x > T::zero() { gv } else { T::zero() })
                    .expect("shape checked")]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(
            a,
            move |x| x.map(|v| if v > T::zero() { v } else { v * s }),
            Box::new(move |g, p, _| {
                vec![g
                    .zip_map(p[0], "leaky_back", |gv, x| if x > T::zero() { gv } else { gv * s })
                    .expect("shape checked")]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.map(sigmoid_scalar),
            Box::new(|g, _, out| {
                vec![g
                    .zip_map(out, "sigmoid_back", |gv, y| gv * y * (T::one() - y))
                    .expect("shape checked")]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.map(|v| v.tanh()),
            Box::new(|g, _, out| {
                vec![g
                    .zip_map(out, "tanh_back", |gv, y| gv * (T::one() - y * y))
                    .expect("shape checked")]
            }),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.map(|v| v.exp()),
            Box::new(|g, _, out| {
                vec![g.zip_map(out, "exp_back", |gv, y| gv * y).expect("shape checked")]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            a,
            move |x| x.map(|v| v.max(l).min(h)),
            Box::new(move |g, p, _| {
                vec![g
                    .zip_map(p[0], "clamp_back", |gv, x| {
                        if x >= l && x <= h {
                            gv
                        } else {
                            T::zero()
                        }
                    })
                    .expect("shape checked")]
            }),
        )
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_same(a, b, "min2")?;
        let out = {
            let inner = self.inner.borrow();
            inner.vals[a.0].zip_map(&inner.vals[b.0], "min2", |x, y| if x <= y { x } else { y })?
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(|g, p, _| {
                let mut ga = Tensor::zeros(p[0].shape());
                let mut gb = Tensor::zeros(p[1].shape());
                for i in 0..g.len() {
                    if p[0].data()[i] <= p[1].data()[i] {
                        ga.data_mut()[i] = g.data()[i];
                    } else {
                        gb.data_mut()[i] = g.data()[i];
                    }
                }
                vec![ga, gb]
            })),
        ))
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Tensor::scalar(x.sum()),
            Box::new(|g, p, _| vec![Tensor::full(p[0].shape(), g.item())]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = {
            let inner = self.inner.borrow();
            inner.vals[a.0].len()
        };
        let inv = T::from_f64(1.0 / n as f64);
        self.unary(
            a,
            move |x| Tensor::scalar(x.sum() * inv),
            Box::new(move |g, p, _| vec![Tensor::full(p[0].shape(), g.item() * inv)]),
        )
    }

    /// Scalar `sum((a - target)^2)` against a constant target.
    pub fn sum_sq_err(&self, a: Var, target: &Tensor<T>) -> Result<Var, DiffError> {
        let sa = self.shape(a);
        if sa != target.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "sum_sq_err",
                lhs: sa,
                rhs: target.shape().to_vec(),
            });
        }
        let t = target.clone();
        let tb = target.clone();
        Ok(self.unary(
            a,
            move |x| {
                let mut s = T::zero();
                for (&xv, &tv) in x.data().iter().zip(t.data()) {
                    let d = xv - tv;
                    s += d * d;
                }
                Tensor::scalar(s)
            },
            Box::new(move |g, p, _| {
                let gs = g.item();
                let two = T::from_f64(2.0);
                vec![p[0]
                    .zip_map(&tb, "sum_sq_err_back", |xv, tv| gs * two * (xv - tv))
                    .expect("shape checked")]
            }),
        ))
    }

    // ---- structured ops ----

    /// Rows of `x` selected by `idx`; duplicate indices are allowed.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        self.want_rank(x, 2, "gather_rows")?;
        let sx = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sx[0]) {
            return Err(DiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {bad} out of bounds for {} rows", sx[0]),
            });
        }
        let indices = idx.to_vec();
        let idx_back = idx.to_vec();
        let d = sx[1];
        let n = sx[0];
        let out = {
            let inner = self.inner.borrow();
            let xd = inner.vals[x.0].data();
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in &indices {
                data.extend_from_slice(&xd[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![indices.len(), d], data).expect("sized")
        };
        Ok(self.push(
            vec![x.0],
            out,
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&[n, d]);
                for (k, &i) in idx_back.iter().enumerate() {
                    let src = &g.data()[k * d..(k + 1) * d];
                    let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Adds row `k` of `x` into output row `idx[k]`; output has `n` rows.
    pub fn scatter_add_rows(&self, x: Var, idx: &[usize], n: usize) -> Result<Var, DiffError> {
        self.want_rank(x, 2, "scatter_add_rows")?;
        let sx = self.shape(x);
        if sx[0] != idx.len() {
            return Err(DiffError::InvalidArgument {
                op: "scatter_add_rows",
                msg: format!("{} rows but {} indices", sx[0], idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DiffError::InvalidArgument {
                op: "scatter_add_rows",
                msg: format!("target row {bad} out of bounds for {n} rows"),
            });
        }
        let d = sx[1];
        let indices = idx.to_vec();
        let idx_back = idx.to_vec();
        let out = {
            let inner = self.inner.borrow();
            let xd = inner.vals[x.0].data();
            let mut o = Tensor::zeros(&[n, d]);
            for (k, &i) in indices.iter().enumerate() {
                let src = &xd[k * d..(k + 1) * d];
                let dst = &mut o.data_mut()[i * d..(i + 1) * d];
                for (ov, &v) in dst.iter_mut().zip(src) {
                    *ov += v;
                }
            }
            o
        };
        Ok(self.push(
            vec![x.0],
            out,
            Some(Box::new(move |g, p, _| {
                let d = p[0].shape()[1];
                let mut gx = Tensor::zeros(p[0].shape());
                for (k, &i) in idx_back.iter().enumerate() {
                    let src = &g.data()[i * d..(i + 1) * d];
                    gx.data_mut()[k * d..(k + 1) * d].copy_from_slice(src);
                }
                vec![gx]
            })),
        ))
    }

    /// Softmax of `scores [M,1]` within segments; each segment normalizes
    /// independently and sums to one.
    pub fn segment_softmax(&self, scores: Var, seg: &[usize], n_seg: usize) -> Result<Var, DiffError> {
        let ss = self.shape(scores);
        if ss.len() != 2 || ss[1] != 1 || ss[0] != seg.len() {
            return Err(DiffError::InvalidArgument {
                op: "segment_softmax",
                msg: format!("scores {:?} vs {} segment ids", ss, seg.len()),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(DiffError::InvalidArgument {
                op: "segment_softmax",
                msg: format!("segment id {bad} out of bounds for {n_seg}"),
            });
        }
        let seg_f = seg.to_vec();
        let seg_b = seg.to_vec();
        let out = {
            let inner = self.inner.borrow();
            let xd = inner.vals[scores.0].data();
            let mut maxes = vec![T::neg_infinity(); n_seg];
            for (i, &s) in seg_f.iter().enumerate() {
                if xd[i] > maxes[s] {
                    maxes[s] = xd[i];
                }
            }
            let mut sums = vec![T::zero(); n_seg];
            let mut ex = vec![T::zero(); xd.len()];
            for (i, &s) in seg_f.iter().enumerate() {
                let e = (xd[i] - maxes[s]).exp();
                ex[i] = e;
                sums[s] += e;
            }
            for (i, &s) in seg_f.iter().enumerate() {
                ex[i] = ex[i] / sums[s];
            }
            Tensor::new(vec![xd.len(), 1], ex).expect("sized")
        };
        Ok(self.push(
            vec![scores.0],
            out,
            Some(Box::new(move |g, _, y| {
                let mut dots = vec![T::zero(); n_seg];
                for (i, &s) in seg_b.iter().enumerate() {
                    dots[s] += g.data()[i] * y.data()[i];
                }
                let mut gx = Tensor::zeros(y.shape());
                for (i, &s) in seg_b.iter().enumerate() {
                    gx.data_mut()[i] = y.data()[i] * (g.data()[i] - dots[s]);
                }
                vec![gx]
            })),
        ))
    }

    /// Broadcast-multiplies each row of `x [K,d]` by scalar `s [K,1]`.
    pub fn mul_col(&self, x: Var, s: Var) -> Result<Var, DiffError> {
        self.want_rank(x, 2, "mul_col")?;
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss.len() != 2 || ss[1] != 1 || ss[0] != sx[0] {
            return Err(DiffError::ShapeMismatch { op: "mul_col", lhs: sx, rhs: ss });
        }
        let d = sx[1];
        let out = {
            let inner = self.inner.borrow();
            let xd = inner.vals[x.0].data();
            let sd = inner.vals[s.0].data();
            let mut o = Tensor::zeros(&sx);
            for k in 0..sx[0] {
                for j in 0..d {
                    o.data_mut()[k * d + j] = xd[k * d + j] * sd[k];
                }
            }
            o
        };
        Ok(self.push(
            vec![x.0, s.0],
            out,
            Some(Box::new(move |g, p, _| {
                let k = p[0].shape()[0];
                let d = p[0].shape()[1];
                let mut gx = Tensor::zeros(p[0].shape());
                let mut gs = Tensor::zeros(p[1].shape());
                for r in 0..k {
                    let sv = p[1].data()[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = g.data()[r * d + j] * sv;
                        dot += g.data()[r * d + j] * p[0].data()[r * d + j];
                    }
                    gs.data_mut()[r] = dot;
                }
                vec![gx, gs]
            })),
        ))
    }

    /// Column-wise sum of rows: `[N,d] -> [1,d]`.
    pub fn sum_rows(&self, x: Var) -> Result<Var, DiffError> {
        self.want_rank(x, 2, "sum_rows")?;
        let sx = self.shape(x);
        let d = sx[1];
        Ok(self.unary(
            x,
            move |t| {
                let mut o = Tensor::zeros(&[1, d]);
                for row in t.data().chunks_exact(d) {
                    for (ov, &v) in o.data_mut().iter_mut().zip(row) {
                        *ov += v;
                    }
                }
                o
            },
            Box::new(|g, p, _| {
                let d = p[0].shape()[1];
                let mut gx = Tensor::zeros(p[0].shape());
                for row in gx.data_mut().chunks_exact_mut(d) {
                    row.copy_from_slice(g.data());
                }
                vec![gx]
            }),
        ))
    }

    /// Horizontal concatenation `[K,d1] | [K,d2] -> [K,d1+d2]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_rank(a, 2, "concat_cols")?;
        self.want_rank(b, 2, "concat_cols")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "concat_cols", lhs: sa, rhs: sb });
        }
        let (k, d1, d2) = (sa[0], sa[1], sb[1]);
        let out = {
            let inner = self.inner.borrow();
            let (ad, bd) = (inner.vals[a.0].data(), inner.vals[b.0].data());
            let mut data = Vec::with_capacity(k * (d1 + d2));
            for r in 0..k {
                data.extend_from_slice(&ad[r * d1..(r + 1) * d1]);
                data.extend_from_slice(&bd[r * d2..(r + 1) * d2]);
            }
            Tensor::new(vec![k, d1 + d2], data).expect("sized")
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(move |g, _, _| {
                let mut ga = Tensor::zeros(&[k, d1]);
                let mut gb = Tensor::zeros(&[k, d2]);
                for r in 0..k {
                    let row = &g.data()[r * (d1 + d2)..(r + 1) * (d1 + d2)];
                    ga.data_mut()[r * d1..(r + 1) * d1].copy_from_slice(&row[..d1]);
                    gb.data_mut()[r * d2..(r + 1) * d2].copy_from_slice(&row[d1..]);
                }
                vec![ga, gb]
            })),
        ))
    }

    /// Vertical stack: `[Ka,d]` over `[Kb,d]` giving `[Ka+Kb,d]`.
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.want_rank(a, 2, "concat_rows")?;
        self.want_rank(b, 2, "concat_rows")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[1] {
            return Err(DiffError::ShapeMismatch { op: "concat_rows", lhs: sa, rhs: sb });
        }
        let (ka, kb, d) = (sa[0], sb[0], sa[1]);
        let out = {
            let inner = self.inner.borrow();
            let mut data = Vec::with_capacity((ka + kb) * d);
            data.extend_from_slice(inner.vals[a.0].data());
            data.extend_from_slice(inner.vals[b.0].data());
            Tensor::new(vec![ka + kb, d], data).expect("sized")
        };
        Ok(self.push(
            vec![a.0, b.0],
            out,
            Some(Box::new(move |g, _, _| {
                let ga = Tensor::new(vec![ka, d], g.data()[..ka * d].to_vec()).expect("sized");
                let gb = Tensor::new(vec![kb, d], g.data()[ka * d..].to_vec()).expect("sized");
                vec![ga, gb]
            })),
        ))
    }

    /// Stacks scalar variables into a `[K,1]` column.
    pub fn stack_scalars(&self, vars: &[Var]) -> Result<Var, DiffError> {
        if vars.is_empty() {
            return Err(DiffError::InvalidArgument {
                op: "stack_scalars",
                msg: "empty input".into(),
            });
        }
        for &v in vars {
            let s = self.shape(v);
            let n: usize = s.iter().product();
            if n != 1 {
                return Err(DiffError::Rank { op: "stack_scalars", expected: 0, shape: s });
            }
        }
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let out = {
            let inner = self.inner.borrow();
            let data: Vec<T> = parents.iter().map(|&p| inner.vals[p].item()).collect();
            Tensor::new(vec![parents.len(), 1], data).expect("sized")
        };
        Ok(self.push(
            parents,
            out,
            Some(Box::new(|g, p, _| {
                g.data()
                    .iter()
                    .zip(p)
                    .map(|(&gv, pv)| Tensor::full(pv.shape(), gv))
                    .collect()
            })),
        ))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        self.want_rank(x, 2, "slice_cols")?;
        let sx = self.shape(x);
        if start + len > sx[1] {
            return Err(DiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {}..{} out of bounds for width {}", start, start + len, sx[1]),
            });
        }
        let (k, d) = (sx[0], sx[1]);
        Ok(self.unary(
            x,
            move |t| {
                let mut data = Vec::with_capacity(k * len);
                for r in 0..k {
                    data.extend_from_slice(&t.data()[r * d + start..r * d + start + len]);
                }
                Tensor::new(vec![k, len], data).expect("sized")
            },
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                for r in 0..k {
                    gx.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![gx]
            }),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let sx = self.shape(x);
        let n: usize = shape.iter().product();
        if n != sx.iter().product::<usize>() {
            return Err(DiffError::ShapeMismatch { op: "reshape", lhs: sx, rhs: shape.to_vec() });
        }
        let new_shape = shape.to_vec();
        let old_shape = sx.clone();
        Ok(self.unary(
            x,
            move |t| t.clone().reshaped(new_shape.clone()).expect("checked"),
            Box::new(move |g, _, _| {
                vec![g.clone().reshaped(old_shape.clone()).expect("checked")]
            }),
        ))
    }

    // ---- losses ----

    /// Scalar `sum(softplus(z) - z*y)` for constant targets `y`.
    pub fn bce_with_logits_sum(&self, logits: Var, targets: &Tensor<T>) -> Result<Var, DiffError> {
        let sz = self.shape(logits);
        if sz != targets.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "bce_with_logits_sum",
                lhs: sz,
                rhs: targets.shape().to_vec(),
            });
        }
        let t = targets.clone();
        let tb = targets.clone();
        Ok(self.unary(
            logits,
            move |z| {
                let mut s = T::zero();
                for (&zv, &yv) in z.data().iter().zip(t.data()) {
                    s += softplus_scalar(zv) - zv * yv;
                }
                Tensor::scalar(s)
            },
            Box::new(move |g, p, _| {
                let gs = g.item();
                vec![p[0]
                    .zip_map(&tb, "bce_back", |zv, yv| gs * (sigmoid_scalar(zv) - yv))
                    .expect("shape checked")]
            }),
        ))
    }

    /// Scalar joint log-probability of binary `actions` under independent
    /// Bernoulli(sigmoid(logit)) distributions.
    pub fn bernoulli_logprob_sum(&self, logits: Var, actions: &Tensor<T>) -> Result<Var, DiffError> {
        let sz = self.shape(logits);
        if sz != actions.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "bernoulli_logprob_sum",
                lhs: sz,
                rhs: actions.shape().to_vec(),
            });
        }
        let a = actions.clone();
        let ab = actions.clone();
        Ok(self.unary(
            logits,
            move |z| {
                let mut s = T::zero();
                for (&zv, &av) in z.data().iter().zip(a.data()) {
                    s += -(softplus_scalar(-zv) + (T::one() - av) * zv);
                }
                Tensor::scalar(s)
            },
            Box::new(move |g, p, _| {
                let gs = g.item();
                vec![p[0]
                    .zip_map(&ab, "bernoulli_logprob_back", |zv, av| gs * (av - sigmoid_scalar(zv)))
                    .expect("shape checked")]
            }),
        ))
    }

    /// Scalar total entropy of independent Bernoulli(sigmoid(logit)) bits.
    pub fn bernoulli_entropy_sum(&self, logits: Var) -> Var {
        self.unary(
            logits,
            |z| {
                let mut s = T::zero();
                for &zv in z.data() {
                    s += softplus_scalar(zv) - zv * sigmoid_scalar(zv);
                }
                Tensor::scalar(s)
            },
            Box::new(|g, p, _| {
                let gs = g.item();
                vec![p[0].map(|zv| {
                    let sg = sigmoid_scalar(zv);
                    gs * (-zv) * sg * (T::one() - sg)
                })]
            }),
        )
    }

    /// Mean cross-entropy of `logits [B,K]` against integer class labels.
    pub fn cross_entropy_mean(&self, logits: Var, labels: &[u32]) -> Result<Var, DiffError> {
        self.want_rank(logits, 2, "cross_entropy_mean")?;
        let sz = self.shape(logits);
        let (bsz, k) = (sz[0], sz[1]);
        if bsz != labels.len() {
            return Err(DiffError::InvalidArgument {
                op: "cross_entropy_mean",
                msg: format!("{} rows but {} labels", bsz, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(DiffError::InvalidArgument {
                op: "cross_entropy_mean",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let lab = labels.to_vec();
        let lab_b = labels.to_vec();
        Ok(self.unary(
            logits,
            move |z| {
                let mut loss = T::zero();
                for (b, row) in z.data().chunks_exact(k).enumerate() {
                    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut lse = T::zero();
                    for &v in row {
                        lse += (v - m).exp();
                    }
                    let lse = m + lse.ln();
                    loss += lse - row[lab[b] as usize];
                }
                Tensor::scalar(loss * T::from_f64(1.0 / bsz as f64))
            },
            Box::new(move |g, p, _| {
                let gs = g.item() * T::from_f64(1.0 / bsz as f64);
                let mut gx = Tensor::zeros(p[0].shape());
                for (b, row) in p[0].data().chunks_exact(k).enumerate() {
                    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut denom = T::zero();
                    for &v in row {
                        denom += (v - m).exp();
                    }
                    for (j, &v) in row.iter().enumerate() {
                        let p_j = (v - m).exp() / denom;
                        let y = if lab_b[b] as usize == j { T::one() } else { T::zero() };
                        gx.data_mut()[b * k + j] = gs * (p_j - y);
                    }
                }
                vec![gx]
            }),
        ))
    }

    // ---- convolutional ops ----

    /// `x [B,Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var, DiffError> {
        self.want_rank(x, 4, "conv2d")?;
        self.want_rank(w, 4, "conv2d")?;
        self.want_rank(b, 1, "conv2d")?;
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(DiffError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DiffError::InvalidArgument { op: "conv2d", msg: "zero stride".into() });
        }
        if sx[2] + 2 * padding.0 < sw[2] || sx[3] + 2 * padding.1 < sw[3] {
            return Err(DiffError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[2..]),
            });
        }
        let geom = ConvGeom { stride, padding };
        let out = {
            let inner = self.inner.borrow();
            kernels::conv2d(&inner.vals[x.0], &inner.vals[w.0], &inner.vals[b.0], &geom)
        };
        Ok(self.push(
            vec![x.0, w.0, b.0],
            out,
            Some(Box::new(move |g, p, _| {
                let (gx, gw, gb) = kernels::conv2d_backward(g, p[0], p[1], &geom);
                vec![gx, gw, gb]
            })),
        ))
    }

    pub fn maxpool2d(
        &self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, DiffError> {
        self.want_rank(x, 4, "maxpool2d")?;
        let sx = self.shape(x);
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(DiffError::InvalidArgument { op: "maxpool2d", msg: "zero extent".into() });
        }
        if sx[2] < kernel.0 || sx[3] < kernel.1 {
            return Err(DiffError::InvalidArgument {
                op: "maxpool2d",
                msg: format!("kernel {:?} larger than input {:?}", kernel, &sx[2..]),
            });
        }
        let (out, arg) = {
            let inner = self.inner.borrow();
            kernels::maxpool2d(&inner.vals[x.0], kernel, stride)
        };
        let in_shape = sx;
        Ok(self.push(
            vec![x.0],
            out,
            Some(Box::new(move |g, _, _| {
                vec![kernels::maxpool2d_backward(g, &arg, &in_shape)]
            })),
        ))
    }

    /// Per-channel affine `y = x*scale[c] + shift[c]` with constant
    /// coefficients (folded batch-norm statistics).
    pub fn channel_affine(&self, x: Var, scale: &[T], shift: &[T]) -> Result<Var, DiffError> {
        self.want_rank(x, 4, "channel_affine")?;
        let sx = self.shape(x);
        if sx[1] != scale.len() || sx[1] != shift.len() {
            return Err(DiffError::InvalidArgument {
                op: "channel_affine",
                msg: format!("{} channels, {} scales, {} shifts", sx[1], scale.len(), shift.len()),
            });
        }
        let sc = scale.to_vec();
        let sc_b = scale.to_vec();
        let sh = shift.to_vec();
        let hw = sx[2] * sx[3];
        let c = sx[1];
        Ok(self.unary(
            x,
            move |t| {
                let mut o = t.clone();
                for (i, v) in o.data_mut().iter_mut().enumerate() {
                    let ch = (i / hw) % c;
                    *v = *v * sc[ch] + sh[ch];
                }
                o
            },
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    let ch = (i / hw) % c;
                    *v = *v * sc_b[ch];
                }
                vec![gx]
            }),
        ))
    }

    /// Zeroes masked channels of `x [B,C,H,W]`: `y = x * keep[c]`.
    pub fn mask_channels(&self, x: Var, keep: &[T]) -> Result<Var, DiffError> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[1] != keep.len() {
            return Err(DiffError::InvalidArgument {
                op: "mask_channels",
                msg: format!("shape {:?} vs {} mask entries", sx, keep.len()),
            });
        }
        let m = keep.to_vec();
        let mb = keep.to_vec();
        let hw = sx[2] * sx[3];
        let c = sx[1];
        Ok(self.unary(
            x,
            move |t| {
                let mut o = t.clone();
                for (i, v) in o.data_mut().iter_mut().enumerate() {
                    *v = *v * m[(i / hw) % c];
                }
                o
            },
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v = *v * mb[(i / hw) % c];
                }
                vec![gx]
            }),
        ))
    }
}

#[inline]
fn sigmoid_scalar<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + exp(z))`.
#[inline]
fn softplus_scalar<T: Real>(z: T) -> T {
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 2, &[1., 2., 3., 4.]));
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarLoss { len: 4 }));
    }

    #[test]
    fn grad_of_simple_chain() {
        // loss = sum((a*b) + a) => dl/da = b + 1, dl/db = a
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 3, &[1., 2., 3.]));
        let b = tape.leaf(t2(1, 3, &[4., 5., 6.]));
        let prod = tape.mul(a, b).unwrap();
        let s = tape.add(prod, a).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5., 6., 7.]);
        assert_eq!(g.get(b).unwrap().data(), &[1., 2., 3.]);
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // loss = sum(a*a) => dl/da = 2a via accumulation over both parents
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 2, &[3., -4.]));
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[6., -8.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[0.; 6]));
        let b = tape.leaf(t2(2, 2, &[0.; 4]));
        match tape.matmul(a, b) {
            Err(DiffError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let tape = Tape::<f64>::new();
        let s = tape.leaf(t2(5, 1, &[0.3, -1.2, 2.0, 0.0, 0.7]));
        let seg = [0usize, 0, 1, 1, 1];
        let y = tape.segment_softmax(s, &seg, 2).unwrap();
        let yv = tape.value(y);
        let s0: f64 = yv.data()[0] + yv.data()[1];
        let s1: f64 = yv.data()[2] + yv.data()[3] + yv.data()[4];
        assert!((s0 - 1.0).abs() < 1e-12);
        assert!((s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_then_scatter_recovers_rowsums() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t2(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let gathered = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(gathered).data(), &[5., 6., 1., 2., 5., 6.]);
        let scattered = tape.scatter_add_rows(gathered, &[1, 1, 0], 2).unwrap();
        assert_eq!(tape.value(scattered).data(), &[5., 6., 6., 8.]);
    }

    #[test]
    fn concat_rows_stacks_and_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 2, &[1., 2.]));
        let b = tape.leaf(t2(2, 2, &[3., 4., 5., 6.]));
        let c = tape.concat_rows(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 5., 6.]);
        let w = tape.constant(t2(3, 2, &[1., 10., 100., 1000., 2., 20.]));
        let loss = tape.sum(tape.mul(c, w).unwrap());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1., 10.]);
        assert_eq!(grads.get(b).unwrap().data(), &[100., 1000., 2., 20.]);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(t2(1, 3, &[1.0, 2.0, 0.5]));
        let loss = tape.cross_entropy_mean(z, &[1]).unwrap();
        let lv = tape.value(loss).item();
        let m: f64 = 2.0;
        let lse = m + ((1.0f64 - m).exp() + (2.0f64 - m).exp() + (0.5f64 - m).exp()).ln();
        assert!((lv - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_logprob_matches_direct() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(t2(1, 2, &[0.7, -1.3]));
        let a = t2(1, 2, &[1.0, 0.0]);
        let lp = tape.bernoulli_logprob_sum(z, &a).unwrap();
        let p0 = 1.0 / (1.0 + (-0.7f64).exp());
        let p1 = 1.0 / (1.0 + (1.3f64).exp());
        let want = p0.ln() + (1.0 - p1).ln();
        assert!((tape.value(lp).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mask_channels_zeroes_whole_channels() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 2], 3.0));
        let y = tape.mask_channels(x, &[1.0, 0.0]).unwrap();
        let yv = tape.value(y);
        assert_eq!(&yv.data()[0..4], &[3.0; 4]);
        assert_eq!(&yv.data()[4..8], &[0.0; 4]);
    }
}
