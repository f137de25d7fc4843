//! Adaptive-moment optimizer with the standard defaults.

use crate::nn::{ParamId, ParamSet};
use crate::real::Real;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the step count.
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let m = params
            .ids()
            .map(|id| ArrayD::zeros(params.get(id).shape().to_vec()))
            .collect();
        let v = params
            .ids()
            .map(|id| ArrayD::zeros(params.get(id).shape().to_vec()))
            .collect();
        Adam {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update over `(param, gradient)` pairs; parameters without a
    /// gradient this step keep their moments unchanged.
    pub fn apply(&mut self, params: &mut ParamSet<T>, grads: &[(ParamId, ArrayD<T>)]) {
        self.step += 1;
        let lr = T::from_f(self.config.learning_rate);
        let b1 = T::from_f(self.config.beta1);
        let b2 = T::from_f(self.config.beta2);
        let eps = T::from_f(self.config.eps);
        let one = T::one();
        let bias1 = one - T::from_f(self.config.beta1.powi(self.step as i32));
        let bias2 = one - T::from_f(self.config.beta2.powi(self.step as i32));

        for (id, grad) in grads {
            let idx = id.index();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, g| {
                *m = b1 * *m + (one - b1) * *g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, g| {
                *v = b2 * *v + (one - b2) * *g * *g;
            });
            params.update(*id, |p| {
                ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, m, v| {
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
            });
        }
    }

    pub fn moments(&self) -> (&[ArrayD<T>], &[ArrayD<T>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(config: AdamConfig, step: u64, m: Vec<ArrayD<T>>, v: Vec<ArrayD<T>>) -> Self {
        Adam {
            config,
            step,
            m,
            v,
        }
    }
}

impl ParamId {
    pub(crate) fn index(&self) -> usize {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_learning_rate_in_gradient_sign() {
        // With bias correction, the first update is lr * g / (|g| + eps).
        let mut params = ParamSet::<f64>::new();
        let id = params.add("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &params,
        );
        let grad = ndarray::arr1(&[0.5, -2.0]).into_dyn();
        adam.apply(&mut params, &[(id, grad)]);
        let w = params.get(id);
        assert!((w[[0]] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((w[[1]] - (1.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_descends_to_minimum() {
        // f(w) = (w - 3)^2 / 2, gradient w - 3.
        let mut params = ParamSet::<f64>::new();
        let id = params.add("w", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..2000 {
            let w = params.get(id)[[0]];
            let grad = ArrayD::from_elem(IxDyn(&[1]), w - 3.0);
            adam.apply(&mut params, &[(id, grad)]);
        }
        let w = params.get(id)[[0]];
        assert!((w - 3.0).abs() < 0.05, "converged to {w}");
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = ParamSet::<f32>::new();
            let id = params.add("w", ArrayD::from_elem(IxDyn(&[3]), 0.5));
            let mut adam = Adam::new(AdamConfig::default(), &params);
            for k in 0..10 {
                let grad = ArrayD::from_elem(IxDyn(&[3]), 0.1 * (k as f32 + 1.0));
                adam.apply(&mut params, &[(id, grad)]);
            }
            params.get(id).clone()
        };
        assert_eq!(run(), run());
    }
}
