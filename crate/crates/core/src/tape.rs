//! Define-by-run computation record with reverse-mode differentiation.
//!
//! Forward calls append one node per primitive operation; `backward` replays
//! the trace in reverse exactly once, accumulating gradient contributions
//! additively into every gradient-tracked tensor. A tensor consumed by k
//! operations therefore receives the sum of k contributions, and repeated
//! `backward` calls without a reset keep adding (a second call doubles every
//! gradient).
//!
//! Leaves enter the record either as constants (`leaf`) or as gradient roots
//! (`var`). Gradients are only propagated toward nodes that transitively
//! depend on a `var`, which is what lets attacks differentiate with respect
//! to the input while the cloned network parameters stay frozen constants.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before the log in both losses.
pub const LOG_CLAMP: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum OpRecord {
    Leaf,
    Conv2d { input: TensorId, kernel: TensorId, bias: TensorId },
    MaxPool2x2 { input: TensorId, argmax: Vec<u32> },
    Dense { input: TensorId, weight: TensorId, bias: TensorId },
    Relu { input: TensorId },
    LayerNorm { input: TensorId, gain: TensorId, shift: TensorId, stats: Vec<(f32, f32)> },
    Softmax { input: TensorId },
    Flatten { input: TensorId },
    PolicyGradientLoss { probs: TensorId, actions: Vec<usize>, rewards: Vec<f32> },
    CrossEntropyLoss { probs: TensorId, labels: Vec<usize> },
    Sum { input: TensorId },
    WeightedSum { input: TensorId, coeffs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: OpRecord,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Registers a constant: gradients are never computed for it.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, OpRecord::Leaf, false)
    }

    /// Registers a gradient root (parameter or attacked input).
    pub fn var(&mut self, value: Tensor) -> TensorId {
        self.push(value, OpRecord::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: OpRecord, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kh, kw, kin, cout] = match kshape.as_slice() {
            &[a, b, c, d] => [a, b, c, d],
            other => return Err(Error::Shape(format!("conv kernel must be 4-D, got {other:?}"))),
        };
        if kh != 3 || kw != 3 {
            return Err(Error::Shape(format!("conv window must be 3x3, got {kh}x{kw}")));
        }
        if kin != ishape[3] {
            return Err(Error::Shape(format!(
                "conv input has {} channels but kernel expects {kin}",
                ishape[3]
            )));
        }
        if self.value(bias).dims1()? != cout {
            return Err(Error::Shape("conv bias length must equal output channels".into()));
        }
        let mut out = Tensor::zeros(&[ishape[0], ishape[1], ishape[2], cout]);
        ops::conv2d_forward(
            self.value(input).data(),
            ishape,
            self.value(kernel).data(),
            cout,
            self.value(bias).data(),
            out.data_mut(),
        );
        let req = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(out, OpRecord::Conv2d { input, kernel, bias }, req))
    }

    pub fn max_pool2x2(&mut self, input: TensorId) -> Result<TensorId> {
        let ishape = self.value(input).dims4()?;
        let [b, h, w, c] = ishape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max pool needs even spatial extents, got {h}x{w}")));
        }
        let mut out = Tensor::zeros(&[b, h / 2, w / 2, c]);
        let mut argmax = vec![0u32; out.numel()];
        ops::max_pool2x2_forward(self.value(input).data(), ishape, out.data_mut(), &mut argmax);
        let req = self.requires(input);
        Ok(self.push(out, OpRecord::MaxPool2x2 { input, argmax }, req))
    }

    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let [b, n] = self.value(input).dims2()?;
        let [wn, m] = self.value(weight).dims2()?;
        if wn != n {
            return Err(Error::Shape(format!("dense input width {n} vs weight rows {wn}")));
        }
        if self.value(bias).dims1()? != m {
            return Err(Error::Shape("dense bias length must equal output width".into()));
        }
        let mut out = Tensor::zeros(&[b, m]);
        ops::dense_forward(
            self.value(input).data(),
            n,
            self.value(weight).data(),
            m,
            self.value(bias).data(),
            out.data_mut(),
        );
        let req = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(out, OpRecord::Dense { input, weight, bias }, req))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let x = self.value(input);
        let mut out = Tensor::zeros(x.shape());
        ops::relu_forward(x.data(), out.data_mut());
        let req = self.requires(input);
        self.push(out, OpRecord::Relu { input }, req)
    }

    /// Flattens to `[B, rest]`; row-major data is unchanged.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.value(input).shape();
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        let out = Tensor::from_vec(&[b, rest], self.value(input).data().to_vec())?;
        let req = self.requires(input);
        Ok(self.push(out, OpRecord::Flatten { input }, req))
    }

    pub fn layer_norm(&mut self, input: TensorId, gain: TensorId, shift: TensorId) -> Result<TensorId> {
        let [_, n] = self.value(input).dims2()?;
        if self.value(gain).dims1()? != n || self.value(shift).dims1()? != n {
            return Err(Error::Shape("layer norm gain/shift must match row width".into()));
        }
        let mut out = Tensor::zeros(self.value(input).shape());
        let stats = ops::layer_norm_forward(
            self.value(input).data(),
            n,
            self.value(gain).data(),
            self.value(shift).data(),
            out.data_mut(),
        );
        let req = self.requires(input) || self.requires(gain) || self.requires(shift);
        Ok(self.push(out, OpRecord::LayerNorm { input, gain, shift, stats }, req))
    }

    pub fn softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let [_, k] = self.value(input).dims2()?;
        if k < 2 {
            return Err(Error::Shape(format!("softmax needs at least 2 classes, got {k}")));
        }
        let mut out = Tensor::zeros(self.value(input).shape());
        ops::softmax_forward(self.value(input).data(), k, out.data_mut());
        let req = self.requires(input);
        Ok(self.push(out, OpRecord::Softmax { input }, req))
    }

    /// The reward-weighted log-probability loss over one batch:
    /// `sum_t -(1/B) * log(probs[t, actions[t]]) * rewards[t]`.
    pub fn policy_gradient_loss(
        &mut self,
        probs: TensorId,
        actions: &[usize],
        rewards: &[f32],
    ) -> Result<TensorId> {
        let [b, k] = self.value(probs).dims2()?;
        if actions.len() != b || rewards.len() != b {
            return Err(Error::Input(format!(
                "batch of {b} rows with {} actions and {} rewards",
                actions.len(),
                rewards.len()
            )));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= k) {
            return Err(Error::Input(format!("action {bad} out of range for {k} classes")));
        }
        let p = self.value(probs).data();
        let mut loss = 0.0f32;
        for t in 0..b {
            let pa = p[t * k + actions[t]].max(LOG_CLAMP);
            loss += -pa.ln() * rewards[t] / b as f32;
        }
        let out = Tensor::scalar(loss);
        out.check_finite("policy gradient loss")?;
        let req = self.requires(probs);
        Ok(self.push(
            out,
            OpRecord::PolicyGradientLoss {
                probs,
                actions: actions.to_vec(),
                rewards: rewards.to_vec(),
            },
            req,
        ))
    }

    /// `-(1/B) * sum_t log(probs[t, labels[t]])`.
    pub fn cross_entropy_loss(&mut self, probs: TensorId, labels: &[usize]) -> Result<TensorId> {
        let [b, k] = self.value(probs).dims2()?;
        if labels.len() != b {
            return Err(Error::Input(format!("batch of {b} rows with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let p = self.value(probs).data();
        let mut loss = 0.0f32;
        for t in 0..b {
            loss += -p[t * k + labels[t]].max(LOG_CLAMP).ln() / b as f32;
        }
        let out = Tensor::scalar(loss);
        out.check_finite("cross entropy loss")?;
        let req = self.requires(probs);
        Ok(self.push(out, OpRecord::CrossEntropyLoss { probs, labels: labels.to_vec() }, req))
    }

    /// Sum of all elements; handy for reducing to a scalar in tests.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total: f32 = self.value(input).data().iter().sum();
        let req = self.requires(input);
        self.push(Tensor::scalar(total), OpRecord::Sum { input }, req)
    }

    /// Fixed linear functional `sum_i coeffs[i] * input[i]`; reduces any
    /// tensor to a scalar with a non-degenerate gradient.
    pub fn weighted_sum(&mut self, input: TensorId, coeffs: &[f32]) -> Result<TensorId> {
        if coeffs.len() != self.value(input).numel() {
            return Err(Error::Shape("weighted_sum coefficient length mismatch".into()));
        }
        let total: f32 = self
            .value(input)
            .data()
            .iter()
            .zip(coeffs)
            .map(|(&v, &c)| v * c)
            .sum();
        let req = self.requires(input);
        Ok(self.push(
            Tensor::scalar(total),
            OpRecord::WeightedSum { input, coeffs: coeffs.to_vec() },
            req,
        ))
    }

    /// Reverse-mode gradient of a scalar node. Every gradient-tracked tensor
    /// that the loss depends on receives its partial derivative, added on top
    /// of whatever its grad buffer already holds.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut scratch: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if scratch[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = scratch[i].take().unwrap();
            self.propagate(i, &grad, &mut scratch);
            scratch[i] = Some(grad);
        }
        for (i, slot) in scratch.into_iter().enumerate() {
            if let Some(g) = slot {
                if self.nodes[i].requires_grad {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn add_into(scratch: &mut [Option<Vec<f32>>], id: TensorId, len: usize, f: impl FnOnce(&mut [f32])) {
        let slot = scratch[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, grad: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            OpRecord::Leaf => {}
            OpRecord::Conv2d { input, kernel, bias } => {
                let ishape = self.nodes[input.0].value.dims4().unwrap();
                let cout = self.nodes[kernel.0].value.shape()[3];
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        ops::conv2d_backward_input(
                            grad,
                            ishape,
                            self.nodes[kernel.0].value.data(),
                            cout,
                            dst,
                        );
                    });
                }
                if self.requires(*kernel) || self.requires(*bias) {
                    let mut dk = vec![0.0f32; self.nodes[kernel.0].value.numel()];
                    let mut db = vec![0.0f32; self.nodes[bias.0].value.numel()];
                    ops::conv2d_backward_params(
                        self.nodes[input.0].value.data(),
                        ishape,
                        grad,
                        cout,
                        &mut dk,
                        &mut db,
                    );
                    if self.requires(*kernel) {
                        Self::add_into(scratch, *kernel, dk.len(), |dst| {
                            dst.iter_mut().zip(&dk).for_each(|(d, &v)| *d += v);
                        });
                    }
                    if self.requires(*bias) {
                        Self::add_into(scratch, *bias, db.len(), |dst| {
                            dst.iter_mut().zip(&db).for_each(|(d, &v)| *d += v);
                        });
                    }
                }
            }
            OpRecord::MaxPool2x2 { input, argmax } => {
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        ops::max_pool2x2_backward(grad, argmax, dst);
                    });
                }
            }
            OpRecord::Dense { input, weight, bias } => {
                let [_, n] = self.nodes[input.0].value.dims2().unwrap();
                let [_, m] = self.nodes[weight.0].value.dims2().unwrap();
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        ops::dense_backward_input(grad, self.nodes[weight.0].value.data(), n, m, dst);
                    });
                }
                if self.requires(*weight) || self.requires(*bias) {
                    let mut dw = vec![0.0f32; n * m];
                    let mut db = vec![0.0f32; m];
                    ops::dense_backward_params(
                        self.nodes[input.0].value.data(),
                        grad,
                        n,
                        m,
                        &mut dw,
                        &mut db,
                    );
                    if self.requires(*weight) {
                        Self::add_into(scratch, *weight, dw.len(), |dst| {
                            dst.iter_mut().zip(&dw).for_each(|(d, &v)| *d += v);
                        });
                    }
                    if self.requires(*bias) {
                        Self::add_into(scratch, *bias, db.len(), |dst| {
                            dst.iter_mut().zip(&db).for_each(|(d, &v)| *d += v);
                        });
                    }
                }
            }
            OpRecord::Relu { input } => {
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        ops::relu_backward(self.nodes[input.0].value.data(), grad, dst);
                    });
                }
            }
            OpRecord::LayerNorm { input, gain, shift, stats } => {
                let [_, n] = self.nodes[input.0].value.dims2().unwrap();
                let rows = self.nodes[input.0].value.numel() / n;
                let mut dx = vec![0.0f32; rows * n];
                let mut dg = vec![0.0f32; n];
                let mut db = vec![0.0f32; n];
                ops::layer_norm_backward(
                    self.nodes[input.0].value.data(),
                    n,
                    self.nodes[gain.0].value.data(),
                    stats,
                    grad,
                    &mut dx,
                    &mut dg,
                    &mut db,
                );
                if self.requires(*input) {
                    Self::add_into(scratch, *input, dx.len(), |dst| {
                        dst.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v);
                    });
                }
                if self.requires(*gain) {
                    Self::add_into(scratch, *gain, dg.len(), |dst| {
                        dst.iter_mut().zip(&dg).for_each(|(d, &v)| *d += v);
                    });
                }
                if self.requires(*shift) {
                    Self::add_into(scratch, *shift, db.len(), |dst| {
                        dst.iter_mut().zip(&db).for_each(|(d, &v)| *d += v);
                    });
                }
            }
            OpRecord::Softmax { input } => {
                if self.requires(*input) {
                    let [_, k] = self.nodes[i].value.dims2().unwrap();
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        ops::softmax_backward(self.nodes[i].value.data(), k, grad, dst);
                    });
                }
            }
            OpRecord::Flatten { input } => {
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        dst.iter_mut().zip(grad).for_each(|(d, &v)| *d += v);
                    });
                }
            }
            OpRecord::PolicyGradientLoss { probs, actions, rewards } => {
                if self.requires(*probs) {
                    let [b, k] = self.nodes[probs.0].value.dims2().unwrap();
                    let p = self.nodes[probs.0].value.data();
                    Self::add_into(scratch, *probs, b * k, |dst| {
                        for t in 0..b {
                            let pa = p[t * k + actions[t]];
                            if pa > LOG_CLAMP {
                                dst[t * k + actions[t]] +=
                                    grad[0] * (-rewards[t] / b as f32) / pa;
                            }
                        }
                    });
                }
            }
            OpRecord::CrossEntropyLoss { probs, labels } => {
                if self.requires(*probs) {
                    let [b, k] = self.nodes[probs.0].value.dims2().unwrap();
                    let p = self.nodes[probs.0].value.data();
                    Self::add_into(scratch, *probs, b * k, |dst| {
                        for t in 0..b {
                            let py = p[t * k + labels[t]];
                            if py > LOG_CLAMP {
                                dst[t * k + labels[t]] += grad[0] * (-1.0 / b as f32) / py;
                            }
                        }
                    });
                }
            }
            OpRecord::Sum { input } => {
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        dst.iter_mut().for_each(|d| *d += grad[0]);
                    });
                }
            }
            OpRecord::WeightedSum { input, coeffs } => {
                if self.requires(*input) {
                    Self::add_into(scratch, *input, self.nodes[input.0].value.numel(), |dst| {
                        dst.iter_mut().zip(coeffs).for_each(|(d, &c)| *d += grad[0] * c);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Central-difference check of `build` (a graph from var leaves to one
    /// output tensor) against the recorded backward pass, at up to
    /// `max_coords` coordinates per input. The output is reduced to a scalar
    /// through a fixed random linear functional; the finite-difference side
    /// evaluates that functional in f64 so the oracle adds no rounding noise
    /// of its own.
    fn finite_diff_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
        max_coords: usize,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe_out = {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out).numel()
        };
        // Coefficients scale with 1/numel to keep the functional O(1).
        let coeffs: Vec<f32> = (0..probe_out)
            .map(|_| rng.gen_range(-1.0f32..1.0) / probe_out as f32)
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let loss = tape.weighted_sum(out, &coeffs).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();

        let h = 1e-3f32;
        for (which, input) in inputs.iter().enumerate() {
            for _ in 0..max_coords.min(input.numel()) {
                let coord = rng.gen_range(0..input.numel());
                let mut eval = |delta: f32| -> f64 {
                    let mut tape = Tape::new();
                    let ids: Vec<TensorId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == which {
                                t.data_mut()[coord] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let out = build(&mut tape, &ids);
                    tape.value(out)
                        .data()
                        .iter()
                        .zip(&coeffs)
                        .map(|(&v, &c)| v as f64 * c as f64)
                        .sum()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
                let an = analytic[which][coord] as f64;
                let tol = (1e-3 * an.abs().max(fd.abs())).max(1e-4);
                assert!(
                    (an - fd).abs() <= tol,
                    "input {which} coord {coord}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_doubles_gradients() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::from_vec(&[3], vec![0.2, 0.4, 0.6]).unwrap());
        let r = tape.relu(w);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        let first = tape.grad(w).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let second = tape.grad(w).unwrap().to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::zeros(&[2, 2]));
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::zeros(&[1, 4, 4, 3]));
        let kernel = tape.leaf(Tensor::zeros(&[3, 3, 2, 8]));
        let bias = tape.leaf(Tensor::zeros(&[8]));
        assert!(matches!(tape.conv2d(input, kernel, bias), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_output_shape_follows_kernel() {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::zeros(&[2, 4, 4, 3]));
        let kernel = tape.leaf(Tensor::zeros(&[3, 3, 3, 8]));
        let bias = tape.leaf(Tensor::zeros(&[8]));
        let out = tape.conv2d(input, kernel, bias).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 4, 4, 8]);
    }

    #[test]
    fn pool_rejects_odd_extents() {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::zeros(&[1, 3, 4, 2]));
        assert!(matches!(tape.max_pool2x2(input), Err(Error::Shape(_))));
        let input = tape.leaf(Tensor::zeros(&[2, 32, 32, 16]));
        let out = tape.max_pool2x2(input).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 16, 16, 16]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, &[2, 4, 4, 2]);
        let kernel = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        finite_diff_check(
            &[input, kernel, bias],
            |tape, ids| tape.conv2d(ids[0], ids[1], ids[2]).unwrap(),
            10,
            11,
        );
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = rand_tensor(&mut rng, &[3, 5]);
        let weight = rand_tensor(&mut rng, &[5, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        finite_diff_check(
            &[input, weight, bias],
            |tape, ids| tape.dense(ids[0], ids[1], ids[2]).unwrap(),
            10,
            12,
        );
    }

    #[test]
    fn dense_weight_gradient_of_sum_is_input_transpose_times_ones() {
        // d/dW sum(x.W + b) has every column equal to the column sums of x.
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let input = tape.leaf(x);
        let weight = tape.var(Tensor::zeros(&[3, 2]));
        let bias = tape.leaf(Tensor::zeros(&[2]));
        let out = tape.dense(input, weight, bias).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(weight).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = rand_tensor(&mut rng, &[4, 6]);
        let gain = rand_tensor(&mut rng, &[6]);
        let shift = rand_tensor(&mut rng, &[6]);
        finite_diff_check(
            &[input, gain, shift],
            |tape, ids| tape.layer_norm(ids[0], ids[1], ids[2]).unwrap(),
            10,
            13,
        );
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = rand_tensor(&mut rng, &[3, 5]);
        finite_diff_check(&[logits], |tape, ids| tape.softmax(ids[0]).unwrap(), 10, 14);
    }

    #[test]
    fn pool_and_relu_gradients_match_finite_differences() {
        // Random inputs keep coordinates away from pooling ties and the
        // relu kink at 0 with probability 1.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let input = rand_tensor(&mut rng, &[2, 4, 4, 3]);
        finite_diff_check(
            &[input],
            |tape, ids| {
                let r = tape.relu(ids[0]);
                tape.max_pool2x2(r).unwrap()
            },
            10,
            16,
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Strictly positive rows so the clamp never engages near the samples.
        let b = 4;
        let k = 6;
        let data: Vec<f32> = (0..b * k).map(|_| rng.gen_range(0.05f32..1.0)).collect();
        let probs = Tensor::from_vec(&[b, k], data).unwrap();
        let labels = vec![0usize, 3, 5, 2];
        let actions = vec![1usize, 3, 0, 2];
        let rewards = vec![1.0f32, -1.0, 1.0, -1.0];
        finite_diff_check(
            &[probs.clone()],
            {
                let labels = labels.clone();
                move |tape, ids| tape.cross_entropy_loss(ids[0], &labels).unwrap()
            },
            10,
            18,
        );
        finite_diff_check(
            &[probs],
            move |tape, ids| tape.policy_gradient_loss(ids[0], &actions, &rewards).unwrap(),
            10,
            19,
        );
    }

    #[test]
    fn all_forward_outputs_stay_finite_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let x = tape.var(rand_tensor(&mut rng, &[2, 4, 4, 3]));
            let k = tape.var(rand_tensor(&mut rng, &[3, 3, 3, 4]));
            let kb = tape.var(rand_tensor(&mut rng, &[4]));
            let c = tape.conv2d(x, k, kb).unwrap();
            let r = tape.relu(c);
            let p = tape.max_pool2x2(r).unwrap();
            let f = tape.flatten(p).unwrap();
            let w = tape.var(rand_tensor(&mut rng, &[2 * 2 * 4, 5]));
            let wb = tape.var(rand_tensor(&mut rng, &[5]));
            let d = tape.dense(f, w, wb).unwrap();
            let g = tape.var(rand_tensor(&mut rng, &[5]));
            let s = tape.var(rand_tensor(&mut rng, &[5]));
            let ln = tape.layer_norm(d, g, s).unwrap();
            let sm = tape.softmax(ln).unwrap();
            let loss = tape.cross_entropy_loss(sm, &[0, 1]).unwrap();
            tape.backward(loss).unwrap();
            for id in [c, r, p, f, d, ln, sm, loss] {
                tape.value(id).check_finite("forward output").unwrap();
            }
            for id in [x, k, kb, w, wb, g, s] {
                let gr = tape.grad(id).unwrap();
                assert!(gr.iter().all(|v| v.is_finite()));
            }
        }
    }
}
