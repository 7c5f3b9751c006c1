//! Minimal reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Tape`] as a flat Wengert list; each node
//! stores its parent indices and a boxed backward closure. [`Tape::backward`]
//! seeds the scalar loss with gradient 1 and sweeps the list in reverse,
//! accumulating gradients into every reachable leaf. The whole stack is
//! generic over [`Real`] so that identical programs can run in `f32` for
//! training and `f64` for finite-difference verification.

mod adam;
pub mod fdcheck;
mod init;
mod kernels;
mod nn;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fdcheck::{check_gradients, FdOptions, FdReport};
pub use init::orthogonal_init;
pub use nn::{Activation, Mlp, MlpVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DiffError, Tensor};

use std::fmt::{Debug, Display};

/// Scalar element type for tensors and tapes.
///
/// `f32` is the training type; `f64` exists so gradient implementations can
/// be checked against central finite differences at tight tolerances.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}
