//! First-order optimizers: plain SGD and an adaptive-moment update.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    /// Adaptive-moment defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam(1e-3)
    }
}

#[derive(Debug, Clone)]
pub struct MomentSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Applies parameter updates from the gradients accumulated in each
/// tensor's grad slot. Deterministic given its state; Adam moments are
/// kept per parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub slots: HashMap<String, MomentSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    /// One update over `(name, parameter)` pairs. `grad_scale` is applied
    /// to every gradient before the update (the train loop passes
    /// `1/batch_size` to optimize the mean loss). Gradients are left
    /// untouched; callers zero them between steps.
    pub fn step<'a, F: Scalar>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor<F>)>,
        grad_scale: f64,
    ) -> Result<()> {
        self.step_count += 1;
        for (name, tensor) in params {
            let n = tensor.len();
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.iter().map(|v| v.as_f64() * grad_scale).collect(),
                None => continue, // parameter never touched by backward
            };
            if let Some(pos) = grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter '{name}' at flat index {pos}"
                )));
            }
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    let data = tensor.data_mut();
                    for (p, g) in data.iter_mut().zip(&grad) {
                        *p = *p - F::of_f64(lr * g);
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let slot = self.slots.entry(name).or_insert_with(|| MomentSlot {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    let t = self.step_count as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let data = tensor.data_mut();
                    for i in 0..n {
                        let g = grad[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        data[i] = data[i] - F::of_f64(lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}
