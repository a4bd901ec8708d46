//! Training objectives behind a common interface: the reward-weighted
//! policy-gradient loss and the cross-entropy baseline. Objectives are
//! registered by name ("rl", "ce") and selected at runtime from config.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{sample_actions, ActionBatch};
use crate::reward::{assign_rewards, RewardBatch, RewardScheme};
use crate::tape::{Tape, TensorId};

/// Scalar loss node attached to a computation record.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub id: TensorId,
    pub value: f32,
    pub batch_size: usize,
}

/// `sum_t -(1/B) log(P(a_t|s_t)) * R_t` over the batch. Gradient flows into
/// `probs` only through the taken-action entries.
pub fn policy_gradient_loss(
    tape: &mut Tape,
    probs: TensorId,
    actions: &[usize],
    rewards: &RewardBatch,
) -> Result<LossValue> {
    let id = tape.policy_gradient_loss(probs, actions, &rewards.rewards)?;
    Ok(LossValue { id, value: tape.value(id).data()[0], batch_size: actions.len() })
}

/// `-(1/B) sum_t log(probs[t, y_t])`.
pub fn cross_entropy_loss(tape: &mut Tape, probs: TensorId, labels: &[usize]) -> Result<LossValue> {
    let id = tape.cross_entropy_loss(probs, labels)?;
    Ok(LossValue { id, value: tape.value(id).data()[0], batch_size: labels.len() })
}

/// Which objective a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    CrossEntropy,
    PolicyGradient,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::CrossEntropy => "ce",
            LossMode::PolicyGradient => "rl",
        }
    }

    pub fn parse(s: &str) -> Result<LossMode> {
        match s {
            "ce" => Ok(LossMode::CrossEntropy),
            "rl" => Ok(LossMode::PolicyGradient),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (valid: {})",
                OBJECTIVE_NAMES.join(", ")
            ))),
        }
    }
}

/// What one objective evaluation produced. Sampled actions and rewards are
/// present in policy-gradient mode only.
pub struct ObjectiveOutcome {
    pub loss: LossValue,
    pub actions: Option<ActionBatch>,
    pub rewards: Option<RewardBatch>,
}

/// A training objective: consumes the probability node for one batch and
/// appends its scalar loss to the tape.
pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;
    fn batch_loss(
        &self,
        tape: &mut Tape,
        probs: TensorId,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<ObjectiveOutcome>;
}

pub struct CrossEntropyObjective;

impl Objective for CrossEntropyObjective {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        probs: TensorId,
        labels: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<ObjectiveOutcome> {
        let loss = cross_entropy_loss(tape, probs, labels)?;
        Ok(ObjectiveOutcome { loss, actions: None, rewards: None })
    }
}

/// Samples an action per row, scores it against the label, and trains on the
/// reward-weighted log-probabilities.
pub struct PolicyGradientObjective {
    pub scheme: RewardScheme,
}

impl Objective for PolicyGradientObjective {
    fn name(&self) -> &'static str {
        "rl"
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        probs: TensorId,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<ObjectiveOutcome> {
        let actions = sample_actions(tape.value(probs), rng)?;
        let rewards = assign_rewards(&actions.actions, labels, &self.scheme)?;
        let loss = policy_gradient_loss(tape, probs, &actions.actions, &rewards)?;
        Ok(ObjectiveOutcome { loss, actions: Some(actions), rewards: Some(rewards) })
    }
}

pub const OBJECTIVE_NAMES: &[&str] = &["ce", "rl"];

/// Looks an objective up by its registered name.
pub fn objective_by_name(name: &str, scheme: &RewardScheme) -> Result<Box<dyn Objective>> {
    Ok(build_objective(LossMode::parse(name)?, scheme.clone()))
}

pub fn build_objective(mode: LossMode, scheme: RewardScheme) -> Box<dyn Objective> {
    match mode {
        LossMode::CrossEntropy => Box::new(CrossEntropyObjective),
        LossMode::PolicyGradient => Box::new(PolicyGradientObjective { scheme }),
    }
}
