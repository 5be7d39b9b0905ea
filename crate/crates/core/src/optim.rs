//! Gradient descent: plain SGD with an L2 term, and the adaptive-moment rule
//! with decoupled weight decay. Also the triangular cyclic learning rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Default::default()
        }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimizer state. Moments are keyed by group and parameter name so they
/// survive group re-registration.
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    steps: u64,
    moments: HashMap<(String, String), Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every non-frozen group. Parameters the loss
    /// never reached have no gradient and are left alone entirely, moments
    /// and weight decay included. All gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, groups: &mut [&mut ParamGroup<T>], grads: &Gradients<T>, lr: f64) -> Result<()> {
        for g in groups.iter() {
            if g.frozen {
                continue;
            }
            for (i, p) in g.params().iter().enumerate() {
                if let Some(grad) = grads.param(g.key(i)) {
                    if grad.shape() != p.value.shape() {
                        return Err(Error::dim("optimizer step", p.value.shape(), grad.shape()));
                    }
                    if !grad.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite gradient for parameter {}/{}",
                            g.name(),
                            p.name
                        )));
                    }
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr_t = T::of(lr);
        let wd = T::of(self.cfg.weight_decay);
        let (b1, b2, eps) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2), T::of(self.cfg.eps));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for g in groups.iter_mut() {
            if g.frozen {
                continue;
            }
            let keys: Vec<_> = (0..g.len()).map(|i| g.key(i)).collect();
            let group_name = g.name().to_string();
            for (i, p) in g.params_mut().iter_mut().enumerate() {
                let Some(grad) = grads.param(keys[i]) else { continue };
                match self.cfg.kind {
                    OptimizerKind::Sgd => {
                        for (w, &d) in p.value.data_mut().iter_mut().zip(grad.data()) {
                            *w -= lr_t * (d + wd * *w);
                        }
                    }
                    OptimizerKind::AdamW => {
                        let st = self
                            .moments
                            .entry((group_name.clone(), p.name.clone()))
                            .or_insert_with(|| Moments {
                                m: Tensor::zeros(grad.shape()),
                                v: Tensor::zeros(grad.shape()),
                            });
                        let w = p.value.data_mut();
                        let m = st.m.data_mut();
                        let v = st.v.data_mut();
                        for j in 0..w.len() {
                            let d = grad.data()[j];
                            m[j] = b1 * m[j] + (T::one() - b1) * d;
                            v[j] = b2 * v[j] + (T::one() - b2) * d * d;
                            let mhat = m[j] / bc1;
                            let vhat = v[j] / bc2;
                            w[j] -= lr_t * wd * w[j];
                            w[j] -= lr_t * mhat / (vhat.sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Triangular cyclic schedule. `progress` is measured in epochs; the rate is
/// `low` at the start of each cycle and `high` at its midpoint.
pub fn cyclic_lr(low: f64, high: f64, cycle_epochs: f64, progress: f64) -> f64 {
    if cycle_epochs <= 0.0 {
        return low;
    }
    let pos = (progress / cycle_epochs).fract();
    let tri = 1.0 - (2.0 * pos - 1.0).abs();
    low + (high - low) * tri
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn one_param_step(kind: OptimizerKind, w0: f64, g: f64, wd: f64, lr: f64) -> f64 {
        let mut group = ParamGroup::<f64>::new("g");
        group.add("w", Tensor::scalar(w0));
        let mut tape = Tape::new();
        let vars = group.register(&mut tape);
        let gv = tape.constant(Tensor::scalar(g));
        let l = tape.mul(vars[0], gv).unwrap();
        let grads = tape.backward(l).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            weight_decay: wd,
            ..Default::default()
        });
        opt.step(&mut [&mut group], &grads, lr).unwrap();
        group.params()[0].value.item()
    }

    #[test]
    fn sgd_step() {
        assert_eq!(one_param_step(OptimizerKind::Sgd, 1.0, 1.0, 0.0, 0.1), 0.9);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameter() {
        assert_eq!(one_param_step(OptimizerKind::Sgd, 1.5, 0.0, 0.0, 0.1), 1.5);
        assert_eq!(one_param_step(OptimizerKind::AdamW, 1.5, 0.0, 0.0, 0.1), 1.5);
    }

    #[test]
    fn adaptive_first_step_by_hand() {
        // m = 0.1, v = 0.001; bias corrections give m̂ = 1, v̂ = 1.
        // w ← w − lr·wd·w − lr·m̂/(√v̂ + ε)
        let (w0, lr, wd, eps) = (2.0, 0.01, 0.1, 1e-8);
        let expected = w0 - lr * wd * w0 - lr * 1.0 / (1.0 + eps);
        let got = one_param_step(OptimizerKind::AdamW, w0, 1.0, wd, lr);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut group = ParamGroup::<f64>::new("tower");
        group.add("w0", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let vars = group.register(&mut tape);
        let c = tape.constant(Tensor::scalar(f64::NAN));
        let l = tape.mul(vars[0], c).unwrap();
        let grads = tape.backward(l).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd());
        let err = opt.step(&mut [&mut group], &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("tower/w0"));
        assert_eq!(group.params()[0].value.item(), 1.0);
    }

    #[test]
    fn cyclic_schedule_hits_bounds() {
        assert_eq!(cyclic_lr(1e-4, 1e-2, 4.0, 0.0), 1e-4);
        assert_eq!(cyclic_lr(1e-4, 1e-2, 4.0, 2.0), 1e-2);
        assert_eq!(cyclic_lr(1e-4, 1e-2, 4.0, 4.0), 1e-4);
        let mid = cyclic_lr(0.0, 1.0, 4.0, 1.0);
        assert!((mid - 0.5).abs() < 1e-15);
    }
}
