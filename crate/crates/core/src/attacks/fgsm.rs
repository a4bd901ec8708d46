//! Fast gradient sign method: one signed step of size epsilon.

use super::{input_gradient, signed_step_project, validate_attack_inputs, Attack, AttackConfig};
use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor;

/// `x_adv = clip(x + eps * sign(grad_x CE(f(x), y)))`. Every element's
/// perturbation is exactly -eps, 0, or +eps before clipping.
#[derive(Debug, Clone)]
pub struct Fgsm {
    cfg: AttackConfig,
}

impl Fgsm {
    pub fn new(cfg: AttackConfig) -> Fgsm {
        Fgsm { cfg }
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }
}

impl Attack for Fgsm {
    fn name(&self) -> &'static str {
        "fgsm"
    }

    fn perturb(&self, net: &Network, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        validate_attack_inputs(&self.cfg, images, labels)?;
        let grad = input_gradient(net, images, labels)?;
        let mut out = Tensor::zeros(images.shape());
        signed_step_project(
            images.data(),
            images.data(),
            &grad,
            self.cfg.epsilon,
            self.cfg.epsilon,
            &self.cfg,
            out.data_mut(),
        );
        Ok(out)
    }
}
