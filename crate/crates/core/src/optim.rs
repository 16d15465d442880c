//! Adam optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        Self { cfg, step: 0, m, v }
    }

    /// Apply one update from (param, grad) pairs. Params without a gradient
    /// this step keep their moment state untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (pid, grad) in grads {
            let idx = pid.0;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.value_mut(*pid).data_mut();
            for ((p, g), (mi, vi)) in value
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(x) = (x - 3)^2 from x = 0
        let mut store = ParamStore::new();
        let pid = store.register("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let x = store.value(pid).data()[0];
            let g = 2.0 * (x - 3.0);
            adam.step(&mut store, &[(pid, Tensor::scalar(g))]);
        }
        assert!((store.value(pid).data()[0] - 3.0).abs() < 1e-2);
    }
}
