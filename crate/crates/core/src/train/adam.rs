use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::numerics::Matrix;

use super::model::{Gradients, Learnable};

/// Bias-corrected Adam moments for every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<M: Learnable + ?Sized>(model: &M, lr: f64) -> Self {
        let zeros = Gradients::zeros_like(model).values;
        Self { m: zeros.clone(), v: zeros, t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update, then the model's constraints (λ projection, frozen rows).
    pub fn step<M: Learnable + ?Sized>(&mut self, model: &mut M, grads: &Gradients) -> Result<()> {
        grads.check_finite()?;
        let mut tensors = model.tensors_mut();
        if tensors.len() != grads.values.len() || tensors.len() != self.m.len() {
            return Err(CoffeeError::Shape("optimizer state does not match the model".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (name, value)) in tensors.iter_mut().enumerate() {
            let g = &grads.values[k];
            if g.shape() != value.shape() {
                return Err(CoffeeError::Shape(format!("gradient shape mismatch for '{name}'")));
            }
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (((p, &g), m), v) in value.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        drop(tensors);
        model.after_update();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub threshold: f64,
    pub lr: f64,
}

/// Constant learning rate with an optional one-way drop once the training
/// loss falls below a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub drop: Option<LrDrop>,
    pub dropped: bool,
}

impl LrSchedule {
    pub fn new(base: f64, drop: Option<LrDrop>) -> Self {
        Self { base, drop, dropped: false }
    }

    pub fn current(&self) -> f64 {
        match self.drop {
            Some(d) if self.dropped => d.lr,
            _ => self.base,
        }
    }

    /// Feed the latest training loss and return the learning rate to use next.
    pub fn observe(&mut self, train_loss: f64) -> f64 {
        if let Some(d) = self.drop {
            if train_loss < d.threshold {
                self.dropped = true;
            }
        }
        self.current()
    }
}

/// The learning rate after observing `losses` in order.
pub fn lr_schedule(base: f64, drop: Option<LrDrop>, losses: &[f64]) -> f64 {
    let mut s = LrSchedule::new(base, drop);
    losses.iter().for_each(|&l| {
        s.observe(l);
    });
    s.current()
}
