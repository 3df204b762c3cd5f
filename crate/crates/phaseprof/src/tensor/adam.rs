//! Adam with bias correction, operating on named parameter maps.

use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// First/second moment buffers plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub(crate) m: BTreeMap<String, Vec<f64>>,
    pub(crate) v: BTreeMap<String, Vec<f64>>,
    pub(crate) t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero-initialized state matching the given parameters.
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        let v = params
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        AdamState {
            m,
            v,
            t: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update. Any non-finite gradient aborts before any state or
    /// parameter is touched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFiniteGradient { name: name.clone() });
            }
        }
        for name in params.keys() {
            if !self.m.contains_key(name) || !grads.contains_key(name) {
                return Err(TensorError::UnknownParameter { name: name.clone() });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            for ((p, &g), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
