use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters. Defaults: lr = weight decay = 1e-4, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// The decay `p -= lr * wd * p` is applied before, and independently of, the
/// bias-corrected Adam step.
pub fn adamw_step<T: Float>(
    param: &mut [T],
    grad: &[T],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len(), state.m.len(), state.v.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = T::from_f64(cfg.lr);
    let decay = T::from_f64(cfg.lr * cfg.weight_decay);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let eps = T::from_f64(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] - decay * param[i];
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a whole [`ParamStore`], one moment state per named tensor.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    states: BTreeMap<String, OptimizerState<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&OptimizerState<T>> {
        self.states.get(name)
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            if param.shape() != grad.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adamw",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| OptimizerState::new(grad.len()));
            adamw_step(param.data_mut(), grad.data(), state, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = [1.25f64, -3.0];
        let mut s = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, [1.25, -3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_matches_reference_formula() {
        // Reference AdamW, written out independently for step 1.
        let reference = |p: f64, g: f64, lr: f64, wd: f64| {
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let m = (1.0 - b1) * g / (1.0 - b1);
            let v = (1.0 - b2) * g * g / (1.0 - b2);
            p - lr * wd * p - lr * m / (v.sqrt() + eps)
        };
        for wd in [0.0, 1e-4] {
            let cfg = AdamWConfig {
                weight_decay: wd,
                ..Default::default()
            };
            let mut p = [1.0f64];
            let mut s = OptimizerState::new(1);
            adamw_step(&mut p, &[0.5], &mut s, &cfg).unwrap();
            let expected = reference(1.0, 0.5, 1e-4, wd);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {}", p[0], expected);
        }
        // Decoupled decay contributes exactly -lr * wd * p = -1e-8.
        let run = |wd: f64| {
            let cfg = AdamWConfig {
                weight_decay: wd,
                ..Default::default()
            };
            let mut p = [1.0f64];
            adamw_step(&mut p, &[0.5], &mut OptimizerState::new(1), &cfg).unwrap();
            p[0]
        };
        assert!(((run(0.0) - run(1e-4)) - 1e-8).abs() < 1e-15);
        assert!((run(0.0) - (1.0 - 1e-4 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut p = [0.1f32, -7.5, 3.3e-9];
        let before = p;
        let mut s = OptimizerState::new(3);
        for _ in 0..3 {
            adamw_step(&mut p, &[1.0, -2.0, 0.3], &mut s, &cfg).unwrap();
        }
        assert_eq!(
            p.map(f32::to_bits),
            before.map(f32::to_bits)
        );
        assert_eq!(s.t, 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = [0.0f32; 2];
        let mut s = OptimizerState::new(2);
        assert!(adamw_step(&mut p, &[1.0], &mut s, &AdamWConfig::default()).is_err());
    }
}
