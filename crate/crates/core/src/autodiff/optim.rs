use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::ParamGroup;
use super::AutodiffError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Adam moments with decoupled weight decay.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self { kind: OptimizerKind::Sgd, ..Self::default() }
    }

    pub fn without_clipping(mut self) -> Self {
        self.clip_norm = None;
        self
    }
}

struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Applies gradient steps to the tunable groups it is handed.
///
/// Moment state is keyed by group name and tensor position, so the same
/// optimizer must always see the same groups.
pub struct Optimizer<T> {
    config: OptimizerConfig,
    steps: u64,
    state: HashMap<(String, usize), Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, steps: 0, state: HashMap::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with `learning_rate`; frozen groups are left bit-identical
    /// and every group's gradients are cleared afterwards.
    pub fn apply_update(&mut self, groups: &mut [&mut ParamGroup<T>], learning_rate: T) -> Result<(), AutodiffError> {
        if !(learning_rate > T::zero()) || !learning_rate.is_finite() {
            return Err(AutodiffError::Precondition(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        for g in groups.iter() {
            if g.frozen {
                continue;
            }
            if let Some((i, _)) = g.tensors.iter().enumerate().find(|(_, t)| t.grad().is_none()) {
                return Err(AutodiffError::MissingGradient(format!("{}[{i}]", g.name)));
            }
        }

        let mut factor = T::one();
        if let Some(max_norm) = self.config.clip_norm {
            let sq: T = groups
                .iter()
                .filter(|g| !g.frozen)
                .flat_map(|g| g.tensors.iter())
                .flat_map(|t| t.grad().unwrap().iter())
                .map(|&v| v * v)
                .sum();
            let norm = sq.sqrt();
            let max_norm = T::lit(max_norm);
            if norm > max_norm {
                factor = max_norm / norm;
            }
        }

        self.steps += 1;
        let cfg = &self.config;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let t = self.steps as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps = T::lit(cfg.eps);
        let wd = T::lit(cfg.weight_decay);

        for g in groups.iter_mut() {
            if g.frozen {
                g.clear_grads();
                continue;
            }
            for (ti, tensor) in g.tensors.iter_mut().enumerate() {
                let grad = tensor.take_grad().expect("checked above");
                let values = tensor.data_mut();
                match cfg.kind {
                    OptimizerKind::Sgd => {
                        for (p, &gr) in values.iter_mut().zip(&grad) {
                            *p -= learning_rate * gr * factor;
                        }
                    }
                    OptimizerKind::Adam => {
                        let m = self
                            .state
                            .entry((g.name.clone(), ti))
                            .or_insert_with(|| Moments {
                                first: vec![T::zero(); values.len()],
                                second: vec![T::zero(); values.len()],
                            });
                        for i in 0..values.len() {
                            let gr = grad[i] * factor;
                            m.first[i] = b1 * m.first[i] + (T::one() - b1) * gr;
                            m.second[i] = b2 * m.second[i] + (T::one() - b2) * gr * gr;
                            let mhat = m.first[i] / bc1;
                            let vhat = m.second[i] / bc2;
                            values[i] -= learning_rate * (mhat / (vhat.sqrt() + eps) + wd * values[i]);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn scalar_group(v: f64, frozen: bool) -> ParamGroup<f64> {
        ParamGroup::new("p", vec![Tensor::scalar(v)], frozen)
    }

    #[test]
    fn plain_step() {
        let mut g = scalar_group(1.0, false);
        g.tensors[0].set_grad(vec![2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd().without_clipping());
        opt.apply_update(&mut [&mut g], 0.1).unwrap();
        assert!((g.tensors[0].data()[0] - 0.8).abs() < 1e-15);
        assert!(g.tensors[0].grad().is_none());
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut g = scalar_group(1.0, true);
        g.tensors[0].set_grad(vec![123.0]).unwrap();
        let before = g.digest();
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.apply_update(&mut [&mut g], 0.5).unwrap();
        assert_eq!(before, g.digest());
    }

    #[test]
    fn two_steps_on_square() {
        let mut g = scalar_group(1.0, false);
        let mut opt = Optimizer::new(OptimizerConfig::sgd().without_clipping());
        for _ in 0..2 {
            let grads = {
                let mut gr = Graph::new();
                let vars = gr.bind(&g);
                let y = gr.mul(vars[0], vars[0]).unwrap();
                let grads = gr.backward(y).unwrap();
                grads.get(vars[0]).unwrap().to_vec()
            };
            g.tensors[0].set_grad(grads).unwrap();
            opt.apply_update(&mut [&mut g], 0.1).unwrap();
        }
        assert!((g.tensors[0].data()[0] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut g = scalar_group(1.0, false);
        let mut opt = Optimizer::new(OptimizerConfig::sgd());
        assert!(matches!(
            opt.apply_update(&mut [&mut g], 0.1),
            Err(AutodiffError::MissingGradient(_))
        ));
        let mut g = scalar_group(1.0, false);
        g.tensors[0].set_grad(vec![1.0]).unwrap();
        assert!(opt.apply_update(&mut [&mut g], 0.0).is_err());
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut g = scalar_group(0.0, false);
        g.tensors[0].set_grad(vec![50.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd());
        opt.apply_update(&mut [&mut g], 1.0).unwrap();
        assert!((g.tensors[0].data()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut g = scalar_group(1.0, false);
        g.tensors[0].set_grad(vec![0.3]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.apply_update(&mut [&mut g], 0.01).unwrap();
        assert!((g.tensors[0].data()[0] - 0.99).abs() < 1e-6);
    }
}
