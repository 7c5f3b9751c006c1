use super::tensor::{DiffError, Tensor};
use super::Real;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment state for one flat list of parameter tensors.
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub cfg: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], cfg: AdamConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
) -> Result<(), DiffError> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(DiffError::InvalidArgument {
            op: "adam_step",
            msg: format!(
                "state tracks {} tensors, got {} params / {} grads",
                state.m.len(),
                params.len(),
                grads.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let c = &state.cfg;
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let one = T::one();
    let corr1 = T::from_f64(1.0 - c.beta1.powf(t));
    let corr2 = T::from_f64(1.0 - c.beta2.powf(t));
    let lr = T::from_f64(c.lr);
    let eps = T::from_f64(c.eps);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / corr1;
            let vhat = vi / corr2;
            p.data_mut()[i] = p.data()[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // f(x) = sum(x^2), grad = 2x
        let mut x = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut state = AdamState::new(&[&x], AdamConfig::with_lr(0.05));
        for _ in 0..400 {
            let g = x.map(|v| 2.0 * v);
            adam_step(&mut state, &mut [&mut x], &[g]).unwrap();
        }
        for &v in x.data() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update has magnitude ~lr.
        let mut x = Tensor::<f64>::new(vec![1], vec![10.0]).unwrap();
        let mut state = AdamState::new(&[&x], AdamConfig::with_lr(0.1));
        let g = Tensor::new(vec![1], vec![3.0]).unwrap();
        adam_step(&mut state, &mut [&mut x], &[g]).unwrap();
        assert!((x.data()[0] - (10.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_grads() {
        let mut x = Tensor::<f64>::zeros(&[2]);
        let mut state = AdamState::new(&[&x], AdamConfig::default());
        let g = Tensor::zeros(&[3]);
        assert!(adam_step(&mut state, &mut [&mut x], &[g]).is_err());
    }
}
