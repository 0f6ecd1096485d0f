use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled L2 coefficient, applied as `lr * l2 * param`.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 1e-3 }
    }
}

/// Moment accumulators for every parameter of one store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let first = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect::<Vec<_>>();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    /// One bias-corrected Adam update over every parameter, then clears grads.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Invalid("optimizer state does not match parameter store".into()));
        }
        for (_, p) in store.iter() {
            if p.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let (lr, eps, l2) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.l2));
        for (k, p) in store.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            if m.len() != grad.len() {
                return Err(Error::Shape { op: "adam", detail: format!("moment size for `{}`", p.name) });
            }
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * (mhat / (vhat.sqrt() + eps) + l2 * *w);
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite("adam"));
            }
        }
        Ok(())
    }
}
