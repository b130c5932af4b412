use crate::error::{ArrayError, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, Self::DEFAULT_EPS)
    }

    fn ensure_moments(&mut self, store: &ParamStore<T>) -> Result<()> {
        if self.first_moment.is_empty() && self.step == 0 {
            for entry in store.entries() {
                self.first_moment.push(vec![T::zero(); entry.value.numel()]);
                self.second_moment.push(vec![T::zero(); entry.value.numel()]);
            }
        }
        if self.first_moment.len() != store.len() {
            return Err(ArrayError::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        for (m, entry) in self.first_moment.iter().zip(store.entries()) {
            if m.len() != entry.value.numel() {
                return Err(ArrayError::Shape {
                    op: "adam_step",
                    lhs: vec![m.len()],
                    rhs: entry.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// Aborts before touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.ensure_moments(store)?;
        for entry in store.entries() {
            if !entry.grad.is_finite() {
                return Err(ArrayError::NonFiniteGrad {
                    name: entry.name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.split_mut(id);
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update; see [`AdamState::step`].
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    state.step(store)
}
