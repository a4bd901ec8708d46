//! Dataset ingestion: the CIFAR-10 binary format and a desk-scale synthetic
//! generator for tests and smoke runs.
//!
//! CIFAR-10 binary records are 3073 bytes: one label byte (0..=9) followed by
//! 1024 red, 1024 green, and 1024 blue bytes in row-major pixel order. The
//! loader scales bytes to [0,1] by 1/255 and transposes the color planes to
//! channels-last `[N,32,32,3]`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENT: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const PLANE: usize = IMAGE_EXTENT * IMAGE_EXTENT;
const RECORD_BYTES: usize = 1 + PLANE * IMAGE_CHANNELS;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, 32, 32, 3]`, values in [0,1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: impl Into<String>) -> Result<Dataset> {
        let [n, _, _, _] = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Input(format!("{n} images vs {} labels", labels.len())));
        }
        Ok(Dataset { images, labels, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    /// Gathers the rows at `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.images.shape();
        let sample = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let mut bshape = shape.to_vec();
        bshape[0] = indices.len();
        (Tensor::from_vec(&bshape, data).unwrap(), labels)
    }

    /// First `n` samples, in stored order.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Input(format!("cannot take {n} of {} samples", self.len())));
        }
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&indices);
        Dataset::new(images, labels, format!("{}[..{n}]", self.split))
    }
}

fn decode_records(bytes: &[u8], origin: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{origin}: {} bytes is not a positive multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut images = vec![0.0f32; n * PLANE * IMAGE_CHANNELS];
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks(RECORD_BYTES).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format(format!(
                "{origin}: record {r} has label byte {label} > 9"
            )));
        }
        labels.push(label as usize);
        let pixels = &record[1..];
        let base = r * PLANE * IMAGE_CHANNELS;
        for c in 0..IMAGE_CHANNELS {
            let plane = &pixels[c * PLANE..(c + 1) * PLANE];
            for p in 0..PLANE {
                images[base + p * IMAGE_CHANNELS + c] = plane[p] as f32 / 255.0;
            }
        }
    }
    Ok((images, labels))
}

/// Decodes one binary batch file.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let origin = path.display().to_string();
    let (images, labels) = decode_records(&bytes, &origin)?;
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(&[n, IMAGE_EXTENT, IMAGE_EXTENT, IMAGE_CHANNELS], images)?,
        labels,
        origin,
    )
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let part = load_cifar10_file(&dir.join(name))?;
        images.extend_from_slice(part.images.data());
        labels.extend(part.labels);
    }
    let n = labels.len();
    let train = Dataset::new(
        Tensor::from_vec(&[n, IMAGE_EXTENT, IMAGE_EXTENT, IMAGE_CHANNELS], images)?,
        labels,
        "train",
    )?;
    let mut test = load_cifar10_file(&dir.join(TEST_FILE))?;
    test.split = "test".into();
    Ok((train, test))
}

// Two fixed palettes, one background and one block color per class.
const BG: [[f32; 3]; 10] = [
    [0.55, 0.25, 0.25],
    [0.25, 0.55, 0.25],
    [0.25, 0.25, 0.55],
    [0.55, 0.55, 0.20],
    [0.55, 0.20, 0.55],
    [0.20, 0.55, 0.55],
    [0.65, 0.45, 0.25],
    [0.35, 0.35, 0.35],
    [0.15, 0.45, 0.30],
    [0.45, 0.15, 0.30],
];
const FG: [[f32; 3]; 10] = [
    [0.95, 0.85, 0.10],
    [0.90, 0.10, 0.80],
    [0.95, 0.55, 0.05],
    [0.05, 0.90, 0.90],
    [0.10, 0.95, 0.25],
    [0.95, 0.10, 0.10],
    [0.10, 0.30, 0.95],
    [0.95, 0.95, 0.95],
    [0.85, 0.60, 0.85],
    [0.60, 0.95, 0.60],
];

/// Class-separable synthetic images: a class-colored background with a
/// class-positioned bright block plus seeded noise. Labels are assigned
/// round-robin, so classes stay balanced to within one sample.
pub fn make_synthetic(num_samples: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 10 {
        return Err(Error::Input("synthetic data supports 1..=10 classes".into()));
    }
    if num_samples < num_classes {
        return Err(Error::Input(format!(
            "need at least one sample per class ({num_samples} < {num_classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = PLANE * IMAGE_CHANNELS;
    let mut images = vec![0.0f32; num_samples * sample];
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let class = i % num_classes;
        labels.push(class);
        let (by, bx) = (2 + (class / 5) * 14, 2 + (class % 5) * 6);
        let img = &mut images[i * sample..(i + 1) * sample];
        for y in 0..IMAGE_EXTENT {
            for x in 0..IMAGE_EXTENT {
                let in_block = y >= by && y < by + 10 && x >= bx && x < bx + 4;
                let palette = if in_block { &FG[class] } else { &BG[class] };
                for c in 0..IMAGE_CHANNELS {
                    let noise: f32 = rng.gen_range(-0.05..0.05);
                    img[(y * IMAGE_EXTENT + x) * IMAGE_CHANNELS + c] =
                        (palette[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(&[num_samples, IMAGE_EXTENT, IMAGE_EXTENT, IMAGE_CHANNELS], images)?,
        labels,
        "synthetic",
    )
}
