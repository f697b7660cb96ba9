use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update to every tensor in `params` and clears their
    /// gradients. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(NumericsError::MissingGrad(name.to_string()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NumericsError::Usage(format!(
                "optimizer tracks {} tensors but the store holds {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let grad = p.grad.take().expect("checked above");
            for (((theta, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
