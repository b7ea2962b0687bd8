//! SGD with momentum and the polynomial learning-rate decay.

use log::warn;

use crate::error::{Error, Result};
use crate::model::SegModel;

/// `base_lr · (1 − iter / total_iters)^power`. An `iter` past the end is
/// clamped to a zero rate with a warning.
pub fn poly_lr(base_lr: f64, iter: u64, total_iters: u64, power: f64) -> f64 {
    if iter > total_iters {
        warn!("poly_lr: iteration {iter} exceeds total {total_iters}; using lr 0");
        return 0.0;
    }
    if total_iters == 0 {
        return base_lr;
    }
    base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power)
}

/// Momentum buffers, one per parameter tensor, plus the schedule settings.
///
/// The update is `v ← m·v + g; p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    pub base_lr: f64,
    pub momentum: f64,
    pub power: f64,
}

impl OptimizerState {
    pub fn new(model: &SegModel, base_lr: f64, momentum: f64, power: f64) -> Result<Self> {
        if !(base_lr > 0.0) || !(0.0..1.0).contains(&momentum) || !(power > 0.0) {
            return Err(Error::invalid(format!(
                "optimizer needs base_lr > 0, momentum in [0, 1), power > 0; got {base_lr}, {momentum}, {power}"
            )));
        }
        Ok(OptimizerState {
            velocity: model.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
            base_lr,
            momentum,
            power,
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub(crate) fn with_velocity(mut self, velocity: Vec<Vec<f64>>) -> Result<Self> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Format("momentum buffers do not match the model".into()));
        }
        self.velocity = velocity;
        Ok(self)
    }
}

/// One momentum SGD update. Non-finite gradients abort the step before any
/// parameter changes.
pub fn sgd_step(
    model: &mut SegModel,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let names = model.param_names();
    if grads.len() != names.len() || state.velocity.len() != names.len() {
        return Err(Error::invalid(format!(
            "sgd_step: {} gradients and {} buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            names.len()
        )));
    }
    for ((g, p), name) in grads.iter().zip(model.params()).zip(&names) {
        if g.len() != p.numel() {
            return Err(Error::invalid(format!(
                "sgd_step: gradient for {name} has {} elements, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }
    let m = state.momentum;
    for ((p, g), v) in model.params_mut().into_iter().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = m * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
