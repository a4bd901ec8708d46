//! The training loop: per-epoch joint shuffling, per-batch adversarial
//! example generation from the current weights, loss selection (ce/rl),
//! RMSprop updates, and periodic checkpointing with metrics rows.
//!
//! Everything that draws randomness inside a run (shuffling, action
//! sampling) comes from one ChaCha stream seeded by the run seed, so a run
//! is bit-reproducible and a checkpoint can resume it exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, Attack, AttackConfig};
use crate::checkpoint::{config_digest, save_checkpoint, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsRecord};
use crate::network::{argmax_rows, build_network, Network, NetworkConfig};
use crate::objectives::{build_objective, LossMode};
use crate::optim::{rmsprop_step, OptimizerState};
use crate::reward::RewardScheme;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which attack, if any, generates the training inputs each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvMode {
    None,
    Fgsm,
    Pgd,
}

impl AdvMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvMode::None => "none",
            AdvMode::Fgsm => "fgsm",
            AdvMode::Pgd => "pgd",
        }
    }

    pub fn parse(s: &str) -> Result<AdvMode> {
        match s {
            "none" => Ok(AdvMode::None),
            "fgsm" => Ok(AdvMode::Fgsm),
            "pgd" => Ok(AdvMode::Pgd),
            other => Err(Error::Config(format!(
                "unknown adversarial training mode {other:?} (valid: none, fgsm, pgd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub decay: f32,
    pub loss_mode: LossMode,
    pub adv_mode: AdvMode,
    pub attack: AttackConfig,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub reward_scheme: RewardScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 220,
            batch_size: 32,
            learning_rate: 1e-4,
            decay: 1e-6,
            loss_mode: LossMode::CrossEntropy,
            adv_mode: AdvMode::None,
            attack: AttackConfig::default(),
            checkpoint_every: 20,
            seed: 0,
            reward_scheme: RewardScheme::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize, num_classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {} outside 1..={dataset_len}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.decay < 0.0 {
            return Err(Error::Config("decay must be nonnegative".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        self.attack.validate()?;
        self.reward_scheme.validate(num_classes)
    }

    pub fn digest(&self) -> u64 {
        config_digest(self)
    }
}

/// Per-epoch training measurements. The accuracies are over the inputs the
/// model actually trained on that epoch (adversarial ones under adversarial
/// training); sampled accuracy exists in rl mode only.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub argmax_accuracy: f32,
    pub sampled_accuracy: Option<f32>,
    pub updates: usize,
}

/// Everything about one batch, handed to observers before the optimizer
/// update, so `net` still holds the weights the adversarial examples were
/// generated from.
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch_index: usize,
    pub sample_indices: &'a [usize],
    pub clean_images: &'a Tensor,
    pub train_images: &'a Tensor,
    pub labels: &'a [usize],
    pub loss: f32,
}

pub trait TrainObserver {
    fn on_batch(&mut self, net: &Network, event: &BatchEvent<'_>);
}

fn build_training_attack(cfg: &TrainConfig) -> Result<Option<Box<dyn Attack>>> {
    match cfg.adv_mode {
        AdvMode::None => Ok(None),
        AdvMode::Fgsm => Ok(Some(attacks::build_attack("fgsm", &cfg.attack)?)),
        AdvMode::Pgd => Ok(Some(attacks::build_attack("pgd", &cfg.attack)?)),
    }
}

/// One pass over the dataset: shuffle, then for every batch generate the
/// training inputs from the current weights, evaluate the objective,
/// backpropagate, and apply one RMSprop update. The remainder batch is
/// trained on with the loss averaged over its true size.
pub fn train_epoch(
    net: &mut Network,
    optimizer: &mut OptimizerState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    mut observer: Option<&mut (dyn TrainObserver + '_)>,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let attack = build_training_attack(cfg)?;
    let objective = build_objective(cfg.loss_mode, cfg.reward_scheme.clone());

    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(rng);

    let mut loss_sum = 0.0f64;
    let mut argmax_correct = 0usize;
    let mut sampled_correct = 0usize;
    let mut updates = 0usize;

    for (batch_index, chunk) in indices.chunks(cfg.batch_size).enumerate() {
        let (clean, labels) = dataset.batch(chunk);
        let train_images = match &attack {
            Some(a) => a.perturb(net, &clean, &labels)?,
            None => clean.clone(),
        };

        let mut tape = Tape::new();
        let input = tape.leaf(train_images.clone());
        let pass = net.forward(&mut tape, input, true)?;
        let outcome = objective.batch_loss(&mut tape, pass.probs, &labels, rng)?;

        let preds = argmax_rows(tape.value(pass.probs));
        argmax_correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        if let Some(actions) = &outcome.actions {
            sampled_correct +=
                actions.actions.iter().zip(&labels).filter(|(a, y)| a == y).count();
        }
        loss_sum += outcome.loss.value as f64 * chunk.len() as f64;

        if let Some(obs) = observer.as_deref_mut() {
            obs.on_batch(
                net,
                &BatchEvent {
                    epoch,
                    batch_index,
                    sample_indices: chunk,
                    clean_images: &clean,
                    train_images: &train_images,
                    labels: &labels,
                    loss: outcome.loss.value,
                },
            );
        }

        tape.backward(outcome.loss.id)?;
        let grads: Vec<&[f32]> = pass
            .params
            .iter()
            .map(|&id| tape.grad(id).expect("tracked parameter has a gradient"))
            .collect();
        rmsprop_step(net.params_mut(), &grads, optimizer)?;
        updates += 1;
    }

    let n = dataset.len() as f64;
    Ok(EpochStats {
        epoch,
        mean_loss: (loss_sum / n) as f32,
        argmax_accuracy: argmax_correct as f32 / dataset.len() as f32,
        sampled_accuracy: (cfg.loss_mode == LossMode::PolicyGradient)
            .then(|| sampled_correct as f32 / dataset.len() as f32),
        updates,
    })
}

/// Run hooks. `progress` is called after every epoch; returning `false`
/// finishes the run early (the final checkpoint and metrics row are still
/// written for the epoch that stopped).
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub observer: Option<&'a mut dyn TrainObserver>,
    pub progress: Option<&'a mut dyn FnMut(&EpochStats) -> bool>,
}

pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: OptimizerState,
    pub records: Vec<MetricsRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    /// Last epoch that actually ran (differs from the config under early stop).
    pub final_epoch: usize,
}

/// Trains from scratch, writing `metrics.csv` and `checkpoint_epoch_*.rck`
/// under `out_dir` at every `checkpoint_every` epochs and at the end.
pub fn train(
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    net_cfg.validate()?;
    cfg.validate(train_ds.len(), net_cfg.num_classes)?;
    let net = build_network(net_cfg, cfg.seed)?;
    let optimizer = OptimizerState::new(net.params(), cfg.learning_rate, cfg.decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1); // distinct from the parameter-init stream
    run_epochs(net, optimizer, rng, 1, cfg, train_ds, test_ds, out_dir, hooks)
}

/// Continues a checkpointed run through the remaining epochs of `cfg`.
/// The checkpoint must have been written by a run with the same config.
pub fn resume(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    if ck.train_config_digest != cfg.digest() {
        return Err(Error::Config(
            "checkpoint was written under a different train config".into(),
        ));
    }
    if ck.epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "checkpoint already at epoch {} of {}",
            ck.epoch, cfg.epochs
        )));
    }
    cfg.validate(train_ds.len(), ck.network_config.num_classes)?;
    let net = ck.restore_network()?;
    let optimizer = ck.optimizer.clone();
    let rng = ck.rng.restore();
    run_epochs(net, optimizer, rng, ck.epoch + 1, cfg, train_ds, test_ds, out_dir, hooks)
}

/// Checkpoint-time measurements: clean train accuracy, clean test accuracy,
/// and FGSM adversarial accuracy on the test set at the configured budget.
fn evaluate_checkpoint(
    net: &Network,
    cfg: &TrainConfig,
    epoch: usize,
    train_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<MetricsRecord> {
    let train_acc = eval::natural_accuracy(net, train_ds)?;
    let test_acc = eval::natural_accuracy(net, test_ds)?;
    let fgsm = attacks::build_attack("fgsm", &cfg.attack)?;
    let adv_acc = eval::adversarial_accuracy(net, test_ds, fgsm.as_ref())?;
    Ok(MetricsRecord::new(epoch, cfg.loss_mode, train_acc, test_acc, adv_acc))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    net: Network,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    first_epoch: usize,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let result = epoch_loop(
        net,
        optimizer,
        rng,
        first_epoch,
        cfg,
        train_ds,
        test_ds,
        out_dir,
        &metrics_path,
        hooks,
    );
    if result.is_err() {
        // Label partial outputs rather than leaving them looking complete.
        let partial = out_dir.join("metrics.csv.partial");
        let _ = fs::rename(&metrics_path, partial);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn epoch_loop(
    mut net: Network,
    mut optimizer: OptimizerState,
    mut rng: ChaCha8Rng,
    first_epoch: usize,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
    metrics_path: &Path,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let digest = cfg.digest();
    let mut metrics_file = fs::File::create(metrics_path)?;
    writeln!(metrics_file, "{}", eval::METRICS_HEADER)?;

    let mut records = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut final_epoch = first_epoch;
    let mut stop = false;

    for epoch in first_epoch..=cfg.epochs {
        let stats = train_epoch(
            &mut net,
            &mut optimizer,
            train_ds,
            cfg,
            epoch,
            &mut rng,
            hooks.observer.as_deref_mut(),
        )?;
        final_epoch = epoch;
        if let Some(progress) = hooks.progress.as_deref_mut() {
            stop = !progress(&stats);
        }
        let scheduled = epoch % cfg.checkpoint_every == 0;
        if scheduled || epoch == cfg.epochs || stop {
            let record = evaluate_checkpoint(&net, cfg, epoch, train_ds, test_ds)?;
            writeln!(metrics_file, "{}", eval::format_metrics_row(&record))?;
            metrics_file.flush()?;
            records.push(record);
            let path = out_dir.join(format!("checkpoint_epoch_{epoch:04}.rck"));
            let ck = Checkpoint::capture(epoch, &net, &optimizer, digest, &rng);
            save_checkpoint(&path, &ck)?;
            checkpoint_paths.push(path);
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        network: net,
        optimizer,
        records,
        checkpoint_paths,
        metrics_path: metrics_path.to_path_buf(),
        final_epoch,
    })
}
