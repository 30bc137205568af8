//! SGD with momentum and AdamW over a [`ParamStore`]. Only trainable
//! parameters (`requires_grad`) with a gradient are touched; frozen tensors
//! and buffers stay bitwise unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::params::{ParamStore, TensorKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn with_lr(mut self, new: f64) -> Self {
        match &mut self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::AdamW { lr, .. } => *lr = new,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_lr(self.lr())?;
        match *self {
            OptimizerConfig::Sgd {
                momentum, weight_decay, ..
            } => {
                if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                    return Err(config_err!("sgd needs momentum in [0, 1) and weight decay >= 0"));
                }
            }
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 || weight_decay < 0.0 {
                    return Err(config_err!("adamw needs betas in [0, 1), eps > 0 and weight decay >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self) -> Result<Optimizer<T>> {
        self.validate()?;
        Ok(Optimizer {
            config: *self,
            lr: self.lr(),
            steps: 0,
            state: Vec::new(),
        })
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(config_err!("learning rate must be finite and non-negative, got {lr}"));
    }
    Ok(())
}

/// Per-parameter moment buffers, allocated on first update.
#[derive(Debug, Clone)]
struct Slot<T> {
    first: Vec<T>,
    second: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    lr: f64,
    steps: u64,
    state: Vec<Option<Slot<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` belongs to store entry `i`; `None`
    /// means no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(dim_err!(
                "{} gradients for a store of {} tensors",
                grads.len(),
                store.len()
            ));
        }
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), || None);
        }
        self.steps += 1;
        let lr = T::of(self.lr);
        for (i, (entry, grad)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            if entry.kind != TensorKind::Param || !entry.tensor.requires_grad {
                continue;
            }
            if g.len() != entry.tensor.numel() {
                return Err(dim_err!(
                    "gradient of {} values for {} of {:?}",
                    g.len(),
                    entry.name,
                    entry.tensor.shape()
                ));
            }
            let n = g.len();
            let slot = self.state[i].get_or_insert_with(|| Slot {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
            });
            let p = entry.tensor.data_mut();
            match self.config {
                OptimizerConfig::Sgd {
                    momentum, weight_decay, ..
                } => {
                    let (mu, wd) = (T::of(momentum), T::of(weight_decay));
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(&mut slot.first) {
                        *v = mu * *v + g + wd * *p;
                        *p -= lr * *v;
                    }
                }
                OptimizerConfig::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let t = self.steps as i32;
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::one() / (T::one() - T::of(beta1.powi(t)));
                    let c2 = T::one() / (T::one() - T::of(beta2.powi(t)));
                    let decay = T::one() - lr * T::of(weight_decay);
                    let eps = T::of(eps);
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut slot.first).zip(&mut slot.second) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *p *= decay;
                        *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("p", Tensor::full(&[1], v));
        s
    }

    #[test]
    fn sgd_hand_case() {
        let mut s = scalar_store(1.0);
        let cfg = OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        cfg.build().unwrap().step(&mut s, &[Some(vec![1.0])]).unwrap();
        assert!((s.entries()[0].tensor.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut s = scalar_store(1.0);
        let mut opt = OptimizerConfig::sgd(0.0).build().unwrap();
        opt.step(&mut s, &[Some(vec![3.0])]).unwrap();
        assert_eq!(s.entries()[0].tensor.data()[0], 1.0);
        assert!(OptimizerConfig::sgd(-1.0).build::<f64>().is_err());
        assert!(opt.set_lr(f64::NAN).is_err());
    }

    #[test]
    fn adamw_scalar_trace() {
        let mut s = scalar_store(1.0);
        let cfg = OptimizerConfig::AdamW {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = cfg.build().unwrap();
        let expect = [0.9900000002, 0.9865439418116511, 0.9827500240835696];
        for (g, e) in [0.5, -0.2, 0.1].into_iter().zip(expect) {
            opt.step(&mut s, &[Some(vec![g])]).unwrap();
            assert!((s.entries()[0].tensor.data()[0] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_first_step_is_sign() {
        for g in [1e-3, -7.0, 250.0] {
            let mut s = scalar_store(0.0);
            let mut opt = OptimizerConfig::adamw(0.1).build().unwrap();
            opt.step(&mut s, &[Some(vec![g])]).unwrap();
            assert!((s.entries()[0].tensor.data()[0] + 0.1 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_and_buffers_untouched() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add_param("a", Tensor::full(&[2], 1.0));
        s.add_buffer("b", Tensor::full(&[2], 1.0));
        s.get_mut(a).requires_grad = false;
        let mut opt = OptimizerConfig::adamw(0.1).build().unwrap();
        for _ in 0..5 {
            opt.step(&mut s, &[Some(vec![1.0; 2]), Some(vec![1.0; 2])]).unwrap();
        }
        assert!(s.entries().iter().all(|e| e.tensor.data() == [1.0, 1.0]));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
    }
}
