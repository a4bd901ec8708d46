//! Input-space adversarial attacks behind a common trait.
//!
//! Every attack maximizes cross-entropy on the softmax output regardless of
//! how the target model was trained, reads the network strictly read-only,
//! and returns images inside both the L-infinity ball around the originals
//! and the valid pixel range. Attacks are registered by name and built from
//! an [`AttackConfig`]; see [`build_attack`].

mod ensemble;
mod fgsm;
mod pgd;

pub use ensemble::WorstCaseEnsemble;
pub use fgsm::Fgsm;
pub use pgd::PgdLinf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity budget on the [0,1] pixel scale.
    pub epsilon: f32,
    /// Per-iteration step (iterative attacks only).
    pub step_size: f32,
    /// Iteration count (iterative attacks only).
    pub num_steps: usize,
    pub clip_min: f32,
    pub clip_max: f32,
    /// Start PGD from a random point in the ball instead of the input.
    /// Off by default; the reference configuration lists no random start.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            num_steps: 5,
            clip_min: 0.0,
            clip_max: 1.0,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.epsilon > 1.0 {
            return Err(Error::Config("epsilon above 1 exceeds the pixel range".into()));
        }
        if self.step_size < 0.0 || !self.step_size.is_finite() {
            return Err(Error::Config("step_size must be >= 0".into()));
        }
        if self.clip_min >= self.clip_max {
            return Err(Error::Config("clip_min must be below clip_max".into()));
        }
        Ok(())
    }
}

/// Parses "8/255" fraction syntax as well as plain decimals.
pub fn parse_fraction(s: &str) -> Result<f32> {
    let s = s.trim();
    let value = if let Some((num, den)) = s.split_once('/') {
        let num: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction numerator in {s:?}")))?;
        let den: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fraction denominator in {s:?}")))?;
        if den == 0.0 {
            return Err(Error::Config(format!("zero denominator in {s:?}")));
        }
        num / den
    } else {
        s.parse::<f64>()
            .map_err(|_| Error::Config(format!("cannot parse {s:?} as a number")))?
    };
    Ok(value as f32)
}

/// A white-box evasion attack. Implementations never mutate the network.
pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;
    /// Adversarial counterpart of `images` targeting higher loss on `labels`.
    fn perturb(&self, net: &Network, images: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

pub const ATTACK_NAMES: &[&str] = &["fgsm", "pgd", "ensemble"];

/// Builds a registered attack by name. "ensemble" is the worst-case
/// combination of FGSM and PGD under the same configuration.
pub fn build_attack(name: &str, cfg: &AttackConfig) -> Result<Box<dyn Attack>> {
    cfg.validate()?;
    match name {
        "fgsm" => Ok(Box::new(Fgsm::new(*cfg))),
        "pgd" => Ok(Box::new(PgdLinf::new(*cfg))),
        "ensemble" => Ok(Box::new(WorstCaseEnsemble::new(vec![
            Box::new(Fgsm::new(*cfg)),
            Box::new(PgdLinf::new(*cfg)),
        ])?)),
        other => Err(Error::Config(format!(
            "unknown attack {other:?} (valid: {})",
            ATTACK_NAMES.join(", ")
        ))),
    }
}

/// `sign(0) = 0`, unlike `f32::signum`.
#[inline]
pub(crate) fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the batch cross-entropy with respect to the input pixels,
/// with the network parameters frozen.
pub(crate) fn input_gradient(net: &Network, images: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let input = tape.var(images.clone());
    let pass = net.forward(&mut tape, input, false)?;
    let loss = tape.cross_entropy_loss(pass.probs, labels)?;
    tape.backward(loss)?;
    Ok(tape.grad(input).expect("input is a gradient root").to_vec())
}

/// Representable interval `[lo, hi]` contained in the exact real interval
/// `[x-eps, x+eps]`. Clamping to it keeps the measured perturbation within
/// the budget even after f32 rounding.
#[inline]
pub(crate) fn ball_bounds(x: f32, eps: f32) -> (f32, f32) {
    let lo_exact = x as f64 - eps as f64;
    let hi_exact = x as f64 + eps as f64;
    let mut lo = lo_exact as f32;
    if (lo as f64) < lo_exact {
        lo = lo.next_up();
    }
    let mut hi = hi_exact as f32;
    if (hi as f64) > hi_exact {
        hi = hi.next_down();
    }
    (lo, hi)
}

/// One signed-gradient ascent step from `cur`, projected onto the pixel box
/// and the epsilon ball around `origin`. FGSM is the single-step case with
/// `step == eps` and `cur == origin`.
pub(crate) fn signed_step_project(
    cur: &[f32],
    origin: &[f32],
    grad: &[f32],
    step: f32,
    eps: f32,
    cfg: &AttackConfig,
    out: &mut [f32],
) {
    for i in 0..cur.len() {
        let v = cur[i] + step * sign(grad[i]);
        let v = v.max(cfg.clip_min).min(cfg.clip_max);
        let (lo, hi) = ball_bounds(origin[i], eps);
        out[i] = v.max(lo).min(hi);
    }
}

pub(crate) fn validate_attack_inputs(
    cfg: &AttackConfig,
    images: &Tensor,
    labels: &[usize],
) -> Result<()> {
    cfg.validate()?;
    let [b, _, _, _] = images.dims4()?;
    if labels.len() != b {
        return Err(Error::Input(format!("{b} images vs {} labels", labels.len())));
    }
    if images
        .data()
        .iter()
        .any(|&v| v < cfg.clip_min || v > cfg.clip_max)
    {
        return Err(Error::Input("image pixels outside the clip range".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, ConvBlock, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(super) fn tiny_net(seed: u64) -> Network {
        let cfg = NetworkConfig {
            conv_blocks: vec![ConvBlock { layers: 1, channels: 4 }],
            dense_units: vec![],
            num_classes: 10,
            input_shape: [8, 8, 3],
        };
        build_network(&cfg, seed).unwrap()
    }

    pub(super) fn random_images(b: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 8 * 8 * 3;
        let images =
            Tensor::from_vec(&[b, 8, 8, 3], (0..n).map(|_| rng.gen_range(0.0f32..=1.0)).collect())
                .unwrap();
        let labels = (0..b).map(|_| rng.gen_range(0..10)).collect();
        (images, labels)
    }

    #[test]
    fn fraction_parsing() {
        assert!((parse_fraction("8/255").unwrap() - 0.03137255).abs() < 1e-6);
        assert_eq!(parse_fraction("0").unwrap(), 0.0);
        assert!((parse_fraction("0.25").unwrap() - 0.25).abs() < 1e-9);
        assert!((parse_fraction(" 2 / 255 ").unwrap() - 2.0 / 255.0).abs() < 1e-9);
        assert!(parse_fraction("8/0").is_err());
        assert!(parse_fraction("abc").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig { epsilon: -0.1, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { epsilon: 1.5, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { clip_min: 1.0, clip_max: 0.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.5), 1.0);
        assert_eq!(sign(-1e-30), -1.0);
    }

    #[test]
    fn ball_bounds_contain_origin_and_respect_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x: f32 = rng.gen_range(0.0..=1.0);
            let eps: f32 = rng.gen_range(0.0..0.2);
            let (lo, hi) = ball_bounds(x, eps);
            assert!(lo <= x && x <= hi);
            assert!(x as f64 - lo as f64 <= eps as f64);
            assert!(hi as f64 - x as f64 <= eps as f64);
        }
        // Zero budget pins the interval to the point.
        let (lo, hi) = ball_bounds(0.7, 0.0);
        assert_eq!((lo, hi), (0.7, 0.7));
    }

    #[test]
    fn registry_builds_all_names() {
        let cfg = AttackConfig::default();
        for &name in ATTACK_NAMES {
            assert_eq!(build_attack(name, &cfg).unwrap().name(), name);
        }
        assert!(build_attack("square", &cfg).is_err());
    }

    #[test]
    fn attacks_leave_parameters_bit_identical() {
        let net = tiny_net(3);
        let before: Vec<Vec<u32>> = net
            .params()
            .iter()
            .map(|p| p.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let (images, labels) = random_images(6, 4);
        for &name in ATTACK_NAMES {
            let attack = build_attack(name, &AttackConfig::default()).unwrap();
            attack.perturb(&net, &images, &labels).unwrap();
        }
        let after: Vec<Vec<u32>> = net
            .params()
            .iter()
            .map(|p| p.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let net = tiny_net(5);
        let (mut images, labels) = random_images(2, 6);
        images.data_mut()[0] = 1.5;
        let attack = build_attack("fgsm", &AttackConfig::default()).unwrap();
        assert!(matches!(
            attack.perturb(&net, &images, &labels),
            Err(Error::Input(_))
        ));
    }
}
