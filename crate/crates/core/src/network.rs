//! The classifier: a configurable VGG-style conv/pool stack ending in
//! dense -> layer norm -> softmax, plus action selection on top of the
//! probability rows (categorical sampling during training, argmax at
//! evaluation time).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// One group of 3x3 conv layers followed by a single 2x2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub layers: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Conv blocks in order; each is followed by a 2x2 max pool.
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden dense widths between the flattened features and the output.
    pub dense_units: Vec<usize>,
    pub num_classes: usize,
    /// Input extents `[H, W, C]`.
    pub input_shape: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            conv_blocks: vec![
                ConvBlock { layers: 2, channels: 32 },
                ConvBlock { layers: 2, channels: 64 },
                ConvBlock { layers: 2, channels: 128 },
            ],
            dense_units: vec![256],
            num_classes: 10,
            input_shape: [32, 32, 3],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let [mut h, mut w, _] = self.input_shape;
        if h == 0 || w == 0 || self.input_shape[2] == 0 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        for (i, block) in self.conv_blocks.iter().enumerate() {
            if block.layers == 0 || block.channels == 0 {
                return Err(Error::Config(format!("conv block {i} must have layers and channels")));
            }
            if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "pool after block {i} needs even spatial extents, have {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
        }
        if self.dense_units.iter().any(|&u| u == 0) {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extents after all pooling stages.
    pub fn final_spatial(&self) -> [usize; 2] {
        let div = 1 << self.conv_blocks.len();
        [self.input_shape[0] / div, self.input_shape[1] / div]
    }

    fn flattened_width(&self) -> usize {
        let [h, w] = self.final_spatial();
        let c = self
            .conv_blocks
            .last()
            .map(|b| b.channels)
            .unwrap_or(self.input_shape[2]);
        h * w * c
    }
}

/// Class indices sampled from probability rows, with their log-probabilities.
#[derive(Debug, Clone)]
pub struct ActionBatch {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    seed: u64,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub probs: TensorId,
    /// Param node ids aligned with [`Network::params`] order.
    pub params: Vec<TensorId>,
}

/// Builds a network with He-uniform fan-in weights, zero biases, and unit
/// gain / zero shift on the layer norm. Equal seeds give bit-identical
/// parameters.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut params = Vec::new();

    let he_uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        let limit = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::from_vec(shape, data).unwrap()
    };

    let mut cin = config.input_shape[2];
    for (b, block) in config.conv_blocks.iter().enumerate() {
        for l in 0..block.layers {
            let cout = block.channels;
            names.push(format!("conv{b}_{l}/kernel"));
            params.push(he_uniform(&[3, 3, cin, cout], 9 * cin, &mut rng));
            names.push(format!("conv{b}_{l}/bias"));
            params.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
    }
    let mut width = config.flattened_width();
    for (i, &units) in config.dense_units.iter().enumerate() {
        names.push(format!("dense{i}/weight"));
        params.push(he_uniform(&[width, units], width, &mut rng));
        names.push(format!("dense{i}/bias"));
        params.push(Tensor::zeros(&[units]));
        width = units;
    }
    names.push("output/weight".into());
    params.push(he_uniform(&[width, config.num_classes], width, &mut rng));
    names.push("output/bias".into());
    params.push(Tensor::zeros(&[config.num_classes]));
    names.push("norm/gain".into());
    params.push(Tensor::filled(&[config.num_classes], 1.0));
    names.push("norm/shift".into());
    params.push(Tensor::zeros(&[config.num_classes]));

    Ok(Network { config: config.clone(), names, params, seed })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Total number of scalar parameters; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all parameters; used when restoring checkpoints.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (current, new) in self.params.iter().zip(&params) {
            if current.shape() != new.shape() {
                return Err(Error::Shape("parameter shape mismatch on restore".into()));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Records the full forward computation on `tape`. With `track_params`
    /// the parameters enter as gradient roots (training); without, they are
    /// frozen constants (inference and input-space attacks).
    pub fn forward(&self, tape: &mut Tape, images: TensorId, track_params: bool) -> Result<ForwardPass> {
        let [b, h, w, c] = tape.value(images).dims4()?;
        let [eh, ew, ec] = self.config.input_shape;
        if h != eh || w != ew || c != ec {
            return Err(Error::Shape(format!(
                "expected input [{b},{eh},{ew},{ec}], got [{b},{h},{w},{c}]"
            )));
        }
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut p = p.clone();
            p.clear_grad();
            ids.push(if track_params { tape.var(p) } else { tape.leaf(p) });
        }

        let mut x = images;
        let mut next = 0usize;
        for block in &self.config.conv_blocks {
            for _ in 0..block.layers {
                x = tape.conv2d(x, ids[next], ids[next + 1])?;
                next += 2;
                x = tape.relu(x);
            }
            x = tape.max_pool2x2(x)?;
        }
        x = tape.flatten(x)?;
        for _ in &self.config.dense_units {
            x = tape.dense(x, ids[next], ids[next + 1])?;
            next += 2;
            x = tape.relu(x);
        }
        x = tape.dense(x, ids[next], ids[next + 1])?;
        next += 2;
        x = tape.layer_norm(x, ids[next], ids[next + 1])?;
        next += 2;
        debug_assert_eq!(next, ids.len());
        let probs = tape.softmax(x)?;
        Ok(ForwardPass { probs, params: ids })
    }

    /// Class-probability rows for an image batch.
    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let pass = self.forward(&mut tape, input, false)?;
        Ok(tape.value(pass.probs).clone())
    }

    /// Argmax predictions; ties break toward the lowest class index.
    pub fn predict_classes(&self, images: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict_probs(images)?;
        Ok(argmax_rows(&probs))
    }
}

/// Row-wise argmax with first-maximum tie breaking.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let [_, k] = probs.dims2().expect("argmax needs a 2-D tensor");
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Draws one class per row from the categorical distribution the row defines.
pub fn sample_actions(probs: &Tensor, rng: &mut ChaCha8Rng) -> Result<ActionBatch> {
    let [b, k] = probs.dims2()?;
    let data = probs.data();
    let mut actions = Vec::with_capacity(b);
    let mut log_probs = Vec::with_capacity(b);
    for t in 0..b {
        let row = &data[t * k..(t + 1) * k];
        let sum: f32 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!(
                "row {t} is not a probability distribution (sum {sum})"
            )));
        }
        let r: f32 = rng.gen();
        let mut cum = 0.0f32;
        let mut chosen = None;
        for (j, &p) in row.iter().enumerate() {
            cum += p;
            if r < cum {
                chosen = Some(j);
                break;
            }
        }
        // Rounding can leave cum slightly below 1; fall back to the last
        // class with any mass.
        let a = chosen.unwrap_or_else(|| {
            row.iter().rposition(|&p| p > 0.0).expect("row sums to ~1")
        });
        actions.push(a);
        log_probs.push(row[a].max(crate::tape::LOG_CLAMP).ln());
    }
    Ok(ActionBatch { actions, log_probs })
}
