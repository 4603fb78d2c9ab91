use serde::{Deserialize, Serialize};

use super::{GruNetwork, Params};
use crate::error::{check_len, DdatError, Result};

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_network(net: &GruNetwork, learning_rate: f64) -> Self {
        Self::new(net.params.len(), learning_rate)
    }

    /// Updates `params` in place. Rejects non-finite gradients without touching any state.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_len("gradient tensor count", params.len(), grads.len())?;
        let mut total = 0;
        for (p, g) in params.iter().zip(grads) {
            check_len("gradient tensor size", p.len(), g.len())?;
            total += p.len();
        }
        check_len("optimizer state size", self.m.len(), total)?;
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(DdatError::NonFinite("gradient (optimizer step skipped)"));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }
}

/// One Adam update of every network parameter.
pub fn adam_step(net: &mut GruNetwork, grads: &Params, state: &mut AdamState) -> Result<()> {
    let g = grads.tensors();
    let mut p = net.params.tensors_mut();
    state.update(&mut p, &g)
}
