//! Momentum SGD, the step learning-rate schedule and training settings.

use crate::error::{Error, Result};
use crate::params::{EntryMut, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    /// Multiplier applied every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Stop after this many epochs without improvement of the monitored loss.
    pub patience: Option<usize>,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 1e-6,
            lr0: 0.01,
            lr_decay: 0.1,
            lr_step_epochs: 20,
            epochs: 40,
            seed: 0,
            augment: true,
            patience: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config(
                "learning rate and its decay must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::Config("lr_step_epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 * lr_decay ^ floor(epoch / lr_step_epochs)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_step_epochs) as i32)
}

/// One velocity buffer per learnable tensor, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    velocity: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &dyn ParamStore<T>) -> Self {
        let mut velocity = Vec::new();
        params.visit("", &mut |name, e| {
            if let crate::params::Entry::Param(p) = e {
                velocity.push((name.to_owned(), Tensor::zeros(p.value.dims())));
            }
        });
        OptState { velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

/// `v <- momentum * v - lr * (g + weight_decay * theta)`, `theta <- theta + v`,
/// then zeroes the gradient. Weight decay reaches convolution weights only.
pub fn sgd_step<T: Scalar>(
    params: &mut dyn ParamStore<T>,
    opt: &mut OptState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mu = T::lit(cfg.momentum);
    let lr_t = T::lit(lr);
    let mut slot = 0;
    let mut failure = None;
    params.visit_mut("", &mut |name, e| {
        let EntryMut::Param(p) = e else { return };
        if failure.is_some() {
            return;
        }
        let Some((vname, v)) = opt.velocity.get_mut(slot) else {
            failure = Some(format!("no velocity for {name}"));
            return;
        };
        slot += 1;
        if vname != name || v.dims() != p.value.dims() || p.grad.dims() != p.value.dims() {
            failure = Some(format!("optimizer state does not match parameter {name}"));
            return;
        }
        let wd = T::lit(if p.decays() { cfg.weight_decay } else { 0.0 });
        for ((th, g), vel) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(v.data_mut())
        {
            *vel = mu * *vel - lr_t * (*g + wd * *th);
            *th += *vel;
        }
        p.zero_grad();
    });
    if let Some(msg) = failure {
        return Err(Error::Usage(msg));
    }
    if slot != opt.velocity.len() {
        return Err(Error::Usage(
            "optimizer state has more slots than the model".into(),
        ));
    }
    Ok(())
}
