use alloc::vec;
use alloc::vec::Vec;

use crate::policy::PolicyParams;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moves `params` against `grads`.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &PolicyParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let c = PolicyConfig::new(2, 2).with_units(2, 2);
        let mut p = PolicyParams::zeros(c);
        let mut g = PolicyParams::zeros(c);
        g.as_mut_slice()[0] = 3.0;
        g.as_mut_slice()[1] = -0.5;
        let mut adam = Adam::new(p.len(), 0.01);
        adam.step(&mut p, &g);
        assert!((p.as_slice()[0] + 0.01).abs() < 1e-9);
        assert!((p.as_slice()[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.as_slice()[2], 0.0);
    }
}
