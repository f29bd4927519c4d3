//! SGD with heavy-ball momentum, L2 weight decay and a step schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    /// Steps at which the rate is multiplied by `factor`.
    pub decay_steps: Vec<u64>,
    pub factor: f64,
}

impl Schedule {
    pub fn lr(&self, step: u64) -> f64 {
        let k = self.decay_steps.iter().filter(|&&s| s <= step).count();
        self.base_lr * self.factor.powi(k as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(schedule: Schedule, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            schedule,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v = momentum * v + g + weight_decay * p`, then `p -= lr(step) * v`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], step: u64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", "tensors", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape("sgd_step", "momentum slots", self.velocity.len(), params.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            g.expect_shape(p.shape(), "sgd_step")?;
        }
        let lr = T::from_f64(self.schedule.lr(step));
        let (m, wd) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
