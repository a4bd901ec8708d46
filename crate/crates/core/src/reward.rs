//! The classification-as-reinforcement environment: each image is a one-step
//! episode, the predicted class is the action, and the reward depends only on
//! whether the action matches the label.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{sample_actions, ActionBatch, Network};
use crate::tensor::Tensor;

/// Maps (action, label) to a scalar reward. Defaults to +1 for a correct
/// prediction and -1 for a wrong one; `per_class_scale` multiplies both
/// magnitudes for the sample's true class (e.g. to reweight rare classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScheme {
    pub reward_correct: f32,
    pub reward_wrong: f32,
    pub per_class_scale: Option<Vec<f32>>,
}

impl Default for RewardScheme {
    fn default() -> Self {
        RewardScheme { reward_correct: 1.0, reward_wrong: -1.0, per_class_scale: None }
    }
}

impl RewardScheme {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.reward_correct > 0.0 && self.reward_wrong < 0.0) {
            return Err(Error::Config(
                "reward scheme needs reward_correct > 0 > reward_wrong".into(),
            ));
        }
        if let Some(scale) = &self.per_class_scale {
            if scale.len() != num_classes {
                return Err(Error::Config(format!(
                    "per_class_scale has {} entries for {num_classes} classes",
                    scale.len()
                )));
            }
            if scale.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config("per_class_scale entries must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch {
    pub rewards: Vec<f32>,
}

/// Per-sample rewards: `scale(y_t) * reward_correct` when the action matches
/// the label, `scale(y_t) * reward_wrong` otherwise.
pub fn assign_rewards(
    actions: &[usize],
    labels: &[usize],
    scheme: &RewardScheme,
) -> Result<RewardBatch> {
    if actions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} actions vs {} labels",
            actions.len(),
            labels.len()
        )));
    }
    let num_classes = scheme.per_class_scale.as_ref().map(Vec::len);
    let rewards = actions
        .iter()
        .zip(labels)
        .map(|(&a, &y)| {
            if let Some(k) = num_classes {
                if a >= k || y >= k {
                    return Err(Error::Input(format!("class index out of range: action {a}, label {y}")));
                }
            }
            let scale = scheme
                .per_class_scale
                .as_ref()
                .map(|s| s[y])
                .unwrap_or(1.0);
            Ok(if a == y { scale * scheme.reward_correct } else { scale * scheme.reward_wrong })
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(RewardBatch { rewards })
}

/// Hook for reward shaping on top of a scheme (e.g. boosting the penalty on
/// repeatedly missed samples). Nothing in the shipped trainer enables this;
/// callers supply their own multipliers.
pub fn apply_sample_multiplier(batch: &mut RewardBatch, multipliers: &[f32]) -> Result<()> {
    if multipliers.len() != batch.rewards.len() {
        return Err(Error::Input("multiplier length mismatch".into()));
    }
    for (r, &m) in batch.rewards.iter_mut().zip(multipliers) {
        *r *= m;
    }
    Ok(())
}

/// One environment interaction for a whole batch: predict, sample an action
/// per image, and collect rewards against the labels.
pub fn episode_step(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    scheme: &RewardScheme,
    rng: &mut ChaCha8Rng,
) -> Result<(ActionBatch, RewardBatch)> {
    let probs = net.predict_probs(images)?;
    let actions = sample_actions(&probs, rng)?;
    let rewards = assign_rewards(&actions.actions, labels, scheme)?;
    Ok((actions, rewards))
}
