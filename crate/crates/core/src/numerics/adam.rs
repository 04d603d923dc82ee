//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::net::ModelParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update. Rejects non-finite gradients without touching state.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if !grads.is_finite() {
            let bad = grads
                .iter()
                .find(|(_, t)| !t.is_finite())
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::NonFinite {
                context: "adam_step".into(),
                detail: format!("gradient for {bad} contains NaN/Inf; update rejected"),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient name mismatch").data();
            let m = self.m.get_mut(name).unwrap().data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let m = self.m.get(name).unwrap().data().to_vec();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let v = self.v.get(name).unwrap().data();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(&m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
