//! Bias-corrected Adam.

use super::{ParamGrads, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

impl Adam {
    /// Applies one update to every trainable parameter.
    pub fn step(&self, store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
            return Err(TensorError::Contract(format!(
                "optimizer state covers {} parameters and gradients {}, store has {}",
                state.m.len(),
                grads.len(),
                store.len()
            )));
        }
        for i in 0..store.len() {
            let n = store.get(i).tensor.numel();
            if grads.get(i).len() != n || state.m[i].len() != n || state.v[i].len() != n {
                return Err(TensorError::Contract(format!(
                    "parameter `{}` has {n} values but its gradient has {}",
                    store.get(i).name,
                    grads.get(i).len()
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            let p = store.get(i);
            if !p.trainable {
                continue;
            }
            let g = grads.get(i);
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let mut values = p.tensor.to_vec();
            for k in 0..values.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = p.tensor.shape().to_vec();
            store.set(i, Tensor::from_parts(shape, values))?;
        }
        Ok(())
    }
}
