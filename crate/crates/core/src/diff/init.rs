use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{DiffError, Tensor};
use super::Real;

/// Orthogonal initialization: rows (or columns, whichever is shorter) of the
/// returned `[rows, cols]` matrix are orthonormal, scaled by `gain`.
///
/// A Gaussian matrix is factored as QR in `f64` with the sign convention that
/// makes R's diagonal positive, which yields a Haar-distributed Q regardless
/// of the element type requested.
pub fn orthogonal_init<T: Real>(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, DiffError> {
    if rows == 0 || cols == 0 {
        return Err(DiffError::InvalidArgument {
            op: "orthogonal_init",
            msg: format!("degenerate shape [{rows}, {cols}]"),
        });
    }
    let (tall_r, tall_c, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut a = vec![0.0f64; tall_r * tall_c];
    for v in a.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let q = gram_schmidt_q(&a, tall_r, tall_c);

    let mut out = Tensor::zeros(&[rows, cols]);
    let od = out.data_mut();
    for i in 0..tall_r {
        for j in 0..tall_c {
            let v = T::from_f64(gain * q[i * tall_c + j]);
            if transpose {
                od[j * cols + i] = v;
            } else {
                od[i * cols + j] = v;
            }
        }
    }
    Ok(out)
}

/// Thin-Q of a tall matrix via twice-iterated modified Gram-Schmidt.
fn gram_schmidt_q(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut q = a.to_vec();
    for j in 0..c {
        for _pass in 0..2 {
            for i in 0..j {
                let mut dot = 0.0;
                for k in 0..r {
                    dot += q[k * c + i] * q[k * c + j];
                }
                for k in 0..r {
                    q[k * c + j] -= dot * q[k * c + i];
                }
            }
        }
        let mut norm = 0.0;
        for k in 0..r {
            norm += q[k * c + j] * q[k * c + j];
        }
        let norm = norm.sqrt().max(1e-300);
        for k in 0..r {
            q[k * c + j] /= norm;
        }
    }
    q
}
