//! Finite-difference verification of tape gradients.
//!
//! The checker only uses forward evaluation: it re-records the program with
//! perturbed inputs and compares central differences against the analytic
//! gradient from [`Tape::backward`]. It lives in the library (rather than a
//! test file) so every crate's tests can drive it against their own programs.

use rand::seq::SliceRandom;
use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{DiffError, Tensor};

pub struct FdOptions {
    /// Central difference step.
    pub h: f64,
    /// Max coordinates sampled per input tensor (all if fewer).
    pub max_coords: usize,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: 24 }
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients of the scalar program `f` against central
/// finite differences over randomly sampled coordinates of each input.
///
/// Relative error uses `max(|analytic|, |numeric|, 1)` as denominator.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    opts: &FdOptions,
    rng: &mut impl Rng,
) -> Result<FdReport, DiffError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(DiffError::NonScalarLoss { len: v.len() });
        }
        Ok(v.item())
    };

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
            .collect()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for ti in 0..inputs.len() {
        let n = inputs[ti].len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(rng);
        coords.truncate(opts.max_coords);
        for &ci in &coords {
            let orig = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - opts.h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let fd = (fp - fm) / (2.0 * opts.h);
            let an = analytic[ti].data()[ci];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdReport { max_rel_err: max_rel, coords_checked: checked })
}
