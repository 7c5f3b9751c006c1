use rand::Rng;

use super::init::orthogonal_init;
use super::tape::{Tape, Var};
use super::tensor::{DiffError, Tensor};
use super::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    fn apply<T: Real>(self, tape: &Tape<T>, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Relu | Activation::LeakyRelu(_) => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }
}

/// Plain fully connected stack; weights are stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    pub hidden: Activation,
    pub output: Activation,
}

impl<T: Real> Mlp<T> {
    /// Orthogonally initialized MLP over `dims = [in, h1, ..., out]`.
    /// The final layer uses `out_gain` (small values keep initial outputs
    /// near zero, the usual choice for policy heads).
    pub fn orthogonal(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        if dims.len() < 2 {
            return Err(DiffError::InvalidArgument {
                op: "Mlp::orthogonal",
                msg: format!("need at least [in, out] dims, got {dims:?}"),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            let gain = if last { out_gain } else { hidden.gain() };
            weights.push(orthogonal_init(dims[i + 1], dims[i], gain, rng)?);
            biases.push(Tensor::zeros(&[dims[i + 1]]));
        }
        Ok(Self { weights, biases, hidden, output })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().map(|w| w.shape()[0]).unwrap_or(0)
    }

    pub fn bind(&self, tape: &Tape<T>) -> MlpVars {
        MlpVars {
            ws: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            bs: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    /// `(name, tensor)` pairs for serialization, e.g. `actor.w0`, `actor.b0`.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, w) in self.weights.iter().enumerate() {
            out.push((format!("{prefix}.w{i}"), w));
        }
        for (i, b) in self.biases.iter().enumerate() {
            out.push((format!("{prefix}.b{i}"), b));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }
}

/// Tape bindings of an [`Mlp`]'s parameters for one recorded computation.
pub struct MlpVars {
    pub ws: Vec<Var>,
    pub bs: Vec<Var>,
    hidden: Activation,
    output: Activation,
}

impl MlpVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        let n = self.ws.len();
        for i in 0..n {
            h = tape.linear(h, self.ws[i], self.bs[i])?;
            let act = if i + 1 == n { self.output } else { self.hidden };
            h = act.apply(tape, h);
        }
        Ok(h)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.ws.iter().chain(self.bs.iter()).copied().collect()
    }
}
