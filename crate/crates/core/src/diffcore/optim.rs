//! SGD with momentum, coupled weight decay, cosine scheduling and EMA.

use serde::{Deserialize, Serialize};

use super::mlp::ModelParams;
use crate::{Error, Result};

/// Learning-rate schedule applied on top of the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// `base * cos(7*pi*step / (16*total_steps))`, monotone nonincreasing,
    /// ending at ~0.19509 of the base rate.
    Cosine { total_steps: u64 },
}

/// Cosine decay value at `step` of `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::input("lr_schedule: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::input("lr_schedule: step exceeds total_steps"));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base * (7.0 * std::f64::consts::PI * frac / 16.0).cos())
}

/// Optimizer state: momentum buffers mirroring the parameter shapes, a step
/// counter, the hyperparameters, and the EMA shadow of the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
    pub step: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema: ModelParams,
    pub schedule: LrSchedule,
}

impl OptimState {
    pub fn new(
        params: &ModelParams,
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        ema_decay: f64,
        schedule: LrSchedule,
    ) -> Result<Self> {
        if base_lr <= 0.0 {
            return Err(Error::input("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::input("momentum must be in [0, 1)"));
        }
        if weight_decay < 0.0 {
            return Err(Error::input("weight decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::input("ema decay must be in [0, 1)"));
        }
        Ok(OptimState {
            velocity: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
            step: 0,
            base_lr,
            momentum,
            weight_decay,
            ema_decay,
            ema: params.clone(),
            schedule,
        })
    }

    /// Scheduled learning rate at the current step counter.
    pub fn current_lr(&self) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine { total_steps } => {
                let step = self.step.min(total_steps);
                lr_schedule(step, total_steps, self.base_lr).expect("total_steps > 0")
            }
        }
    }
}

/// One SGD update:
/// `v <- beta*v + (g + wd*theta)`, `theta <- theta - lr(step)*v`,
/// `ema <- d*ema + (1-d)*theta`, step counter incremented.
pub fn sgd_step(params: &mut ModelParams, grads: &[(Vec<f64>, Vec<f64>)], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.layers.len() {
        return Err(Error::input("gradient layer count mismatch"));
    }
    for (k, ((gw, gb), l)) in grads.iter().zip(&params.layers).enumerate() {
        if gw.len() != l.weights.len() || gb.len() != l.bias.len() {
            return Err(Error::input(format!("gradient shapes mismatch at layer {k}")));
        }
        if gw.iter().chain(gb).any(|v| !v.is_finite()) {
            return Err(Error::TrainingFault {
                step: state.step,
                detail: format!("non-finite gradient in layer {k}"),
            });
        }
    }
    let lr = state.current_lr();
    let (beta, wd, d) = (state.momentum, state.weight_decay, state.ema_decay);
    for (((gw, gb), (vw, vb)), (l, el)) in grads
        .iter()
        .zip(&mut state.velocity)
        .zip(params.layers.iter_mut().zip(&mut state.ema.layers))
    {
        for i in 0..l.weights.len() {
            vw[i] = beta * vw[i] + (gw[i] + wd * l.weights[i]);
            l.weights[i] -= lr * vw[i];
            el.weights[i] = d * el.weights[i] + (1.0 - d) * l.weights[i];
        }
        for i in 0..l.bias.len() {
            vb[i] = beta * vb[i] + (gb[i] + wd * l.bias[i]);
            l.bias[i] -= lr * vb[i];
            el.bias[i] = d * el.bias[i] + (1.0 - d) * l.bias[i];
        }
    }
    state.step += 1;
    Ok(())
}
