//! Projected gradient descent under the L-infinity norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ball_bounds, input_gradient, signed_step_project, validate_attack_inputs, Attack, AttackConfig,
};
use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor;

/// `num_steps` iterations of step-size-scaled sign-gradient ascent, each
/// projected onto the epsilon ball around the original input and the pixel
/// box. Starts at the input itself unless `random_start` is set.
#[derive(Debug, Clone)]
pub struct PgdLinf {
    cfg: AttackConfig,
    /// Seed for the optional random start, so attacks stay reproducible.
    start_seed: u64,
}

impl PgdLinf {
    pub fn new(cfg: AttackConfig) -> PgdLinf {
        PgdLinf { cfg, start_seed: 0 }
    }

    pub fn with_start_seed(cfg: AttackConfig, start_seed: u64) -> PgdLinf {
        PgdLinf { cfg, start_seed }
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }
}

impl Attack for PgdLinf {
    fn name(&self) -> &'static str {
        "pgd"
    }

    fn perturb(&self, net: &Network, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        validate_attack_inputs(&self.cfg, images, labels)?;
        if self.cfg.num_steps == 0 {
            return Ok(images.clone());
        }
        let mut cur = images.clone();
        if self.cfg.random_start {
            let mut rng = ChaCha8Rng::seed_from_u64(self.start_seed);
            let origin = images.data();
            for (i, v) in cur.data_mut().iter_mut().enumerate() {
                let (lo, hi) = ball_bounds(origin[i], self.cfg.epsilon);
                let lo = lo.max(self.cfg.clip_min);
                let hi = hi.min(self.cfg.clip_max);
                *v = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
            }
        }
        let mut next = Tensor::zeros(images.shape());
        for _ in 0..self.cfg.num_steps {
            let grad = input_gradient(net, &cur, labels)?;
            signed_step_project(
                cur.data(),
                images.data(),
                &grad,
                self.cfg.step_size,
                self.cfg.epsilon,
                &self.cfg,
                next.data_mut(),
            );
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_images, tiny_net};
    use super::super::Fgsm;
    use super::*;

    #[test]
    fn zero_steps_returns_the_input() {
        let net = tiny_net(1);
        let (images, labels) = random_images(3, 2);
        let cfg = AttackConfig { num_steps: 0, ..Default::default() };
        let adv = PgdLinf::new(cfg).perturb(&net, &images, &labels).unwrap();
        assert_eq!(adv.data(), images.data());
    }

    #[test]
    fn single_full_step_collapses_to_fgsm_bit_for_bit() {
        let net = tiny_net(3);
        let (images, labels) = random_images(8, 4);
        let eps = 8.0 / 255.0;
        let pgd_cfg = AttackConfig { step_size: eps, num_steps: 1, ..Default::default() };
        let fgsm_cfg = AttackConfig::default();
        let a = PgdLinf::new(pgd_cfg).perturb(&net, &images, &labels).unwrap();
        let b = Fgsm::new(fgsm_cfg).perturb(&net, &images, &labels).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn projection_keeps_every_sample_in_the_ball() {
        let net = tiny_net(5);
        let (images, labels) = random_images(16, 6);
        let cfg = AttackConfig::default();
        let adv = PgdLinf::new(cfg).perturb(&net, &images, &labels).unwrap();
        for (&a, &x) in adv.data().iter().zip(images.data()) {
            assert!((a as f64 - x as f64).abs() <= cfg.epsilon as f64 + 1e-7);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn constant_sign_gradient_reaches_the_ball_boundary() {
        // With the gradient sign fixed at +1 every step, 5 steps of 2/255
        // accumulate min(5*2, 8)/255 = 8/255 exactly (interior pixels).
        let cfg = AttackConfig::default();
        let x = [0.5f32; 4];
        let g = [1.0f32; 4];
        let mut cur = x;
        let mut next = [0.0f32; 4];
        for _ in 0..cfg.num_steps {
            signed_step_project(&cur, &x, &g, cfg.step_size, cfg.epsilon, &cfg, &mut next);
            cur = next;
        }
        for &v in &cur {
            let reached = v as f64 - 0.5;
            assert!((reached - 8.0 / 255.0).abs() < 1e-6, "reached {reached}");
        }
    }

    #[test]
    fn random_start_stays_in_ball_and_is_reproducible() {
        let net = tiny_net(7);
        let (images, labels) = random_images(4, 8);
        let cfg = AttackConfig { random_start: true, ..Default::default() };
        let attack = PgdLinf::with_start_seed(cfg, 11);
        let a = attack.perturb(&net, &images, &labels).unwrap();
        let b = attack.perturb(&net, &images, &labels).unwrap();
        assert_eq!(a.data(), b.data());
        for (&v, &x) in a.data().iter().zip(images.data()) {
            assert!((v as f64 - x as f64).abs() <= cfg.epsilon as f64);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
