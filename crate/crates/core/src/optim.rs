use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = params.zero_grads().0;
        Adam { config, steps: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (k, tensor) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first[k], &mut self.second[k], &grads.0[k]);
            for i in 0..tensor.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                tensor.data[i] -= learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::default();
        p.push("x".into(), alloc::vec![2], alloc::vec![1.0, -1.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &p);
        adam.step(&mut p, &Grads(alloc::vec![alloc::vec![3.0, -0.5]]));
        assert!((p.tensors[0].data[0] - 0.99).abs() < 1e-9);
        assert!((p.tensors[0].data[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::default();
        p.push("x".into(), alloc::vec![1], alloc::vec![5.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..500 {
            let x = p.tensors[0].data[0];
            adam.step(&mut p, &Grads(alloc::vec![alloc::vec![2.0 * (x - 1.5)]]));
        }
        assert!((p.tensors[0].data[0] - 1.5).abs() < 1e-2);
    }
}
