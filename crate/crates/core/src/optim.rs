//! RMSprop with per-update learning-rate decay.
//!
//! `v <- rho*v + (1-rho)*g^2`, `theta <- theta - lr_t * g / (sqrt(v) + eps)`
//! with `lr_t = lr / (1 + decay*step)`, matching the convention of the
//! framework example the hyperparameters were taken from.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RMSPROP_RHO: f32 = 0.9;
pub const RMSPROP_EPS: f32 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub decay: f32,
    pub rho: f32,
    pub epsilon: f32,
    /// Completed update count; the decay schedule is a function of it.
    pub step: u64,
    /// Moving average of squared gradients, shape-matched to the parameters.
    pub square_avg: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], learning_rate: f32, decay: f32) -> OptimizerState {
        OptimizerState {
            learning_rate,
            decay,
            rho: RMSPROP_RHO,
            epsilon: RMSPROP_EPS,
            step: 0,
            square_avg: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Learning rate that the next update will use.
    pub fn current_lr(&self) -> f32 {
        self.learning_rate / (1.0 + self.decay * self.step as f32)
    }
}

/// One RMSprop update over all parameters. Gradients are checked for NaN
/// before anything is mutated; a poisoned batch aborts with diagnostics
/// instead of corrupting the parameters.
pub fn rmsprop_step(params: &mut [Tensor], grads: &[&[f32]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.square_avg.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.square_avg.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::Shape(format!(
                "param {i} has {} elements but gradient has {}",
                p.numel(),
                g.len()
            )));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of param {i} at element {pos} is {} (step {})",
                g[pos], state.step
            )));
        }
    }
    let lr = state.current_lr();
    let (rho, eps) = (state.rho, state.epsilon);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.square_avg) {
        let pd = p.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            vd[i] = rho * vd[i] + (1.0 - rho) * g[i] * g[i];
            pd[i] -= lr * g[i] / (vd[i].sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}
