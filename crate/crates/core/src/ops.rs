//! Raw numeric kernels for the forward and backward passes.
//!
//! Every kernel works on plain slices; the tape in `tape.rs` owns shape
//! validation and gradient bookkeeping. Accumulation order is fixed per
//! output element (window row, window column, input channel), so results
//! are bit-identical across runs and thread counts: parallel loops only
//! ever split disjoint output regions.

use rayon::prelude::*;

const KERNEL_EXTENT: usize = 3;
const PAD: usize = 1;

/// 3x3 same-padding stride-1 cross-correlation plus bias.
///
/// `input` is `[B,H,W,Cin]`, `kernel` is `[3,3,Cin,Cout]`, `out` is `[B,H,W,Cout]`.
pub fn conv2d_forward(
    input: &[f32],
    ishape: [usize; 4],
    kernel: &[f32],
    cout: usize,
    bias: &[f32],
    out: &mut [f32],
) {
    let [_, h, w, cin] = ishape;
    let in_sample = h * w * cin;
    let out_sample = h * w * cout;
    out.par_chunks_mut(out_sample)
        .zip(input.par_chunks(in_sample))
        .for_each(|(out_b, in_b)| {
            for y in 0..h {
                for x in 0..w {
                    let acc = &mut out_b[(y * w + x) * cout..(y * w + x + 1) * cout];
                    acc.copy_from_slice(bias);
                    for ky in 0..KERNEL_EXTENT {
                        let iy = y + ky;
                        if iy < PAD || iy - PAD >= h {
                            continue;
                        }
                        let iy = iy - PAD;
                        for kx in 0..KERNEL_EXTENT {
                            let ix = x + kx;
                            if ix < PAD || ix - PAD >= w {
                                continue;
                            }
                            let ix = ix - PAD;
                            let in_row = &in_b[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                            let w_base = (ky * KERNEL_EXTENT + kx) * cin * cout;
                            for (ci, &v) in in_row.iter().enumerate() {
                                let w_row = &kernel[w_base + ci * cout..w_base + (ci + 1) * cout];
                                for (a, &wv) in acc.iter_mut().zip(w_row) {
                                    *a += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Backward pass of [`conv2d_forward`] with respect to the input.
pub fn conv2d_backward_input(
    dout: &[f32],
    ishape: [usize; 4],
    kernel: &[f32],
    cout: usize,
    dinput: &mut [f32],
) {
    let [_, h, w, cin] = ishape;
    // Kernel transposed to [3,3,Cout,Cin] so the inner loop is contiguous.
    let mut kt = vec![0.0f32; kernel.len()];
    for t in 0..KERNEL_EXTENT * KERNEL_EXTENT {
        for ci in 0..cin {
            for co in 0..cout {
                kt[(t * cout + co) * cin + ci] = kernel[(t * cin + ci) * cout + co];
            }
        }
    }
    let in_sample = h * w * cin;
    let out_sample = h * w * cout;
    dinput
        .par_chunks_mut(in_sample)
        .zip(dout.par_chunks(out_sample))
        .for_each(|(din_b, dout_b)| {
            for y in 0..h {
                for x in 0..w {
                    let dout_row = &dout_b[(y * w + x) * cout..(y * w + x + 1) * cout];
                    for ky in 0..KERNEL_EXTENT {
                        let iy = y + ky;
                        if iy < PAD || iy - PAD >= h {
                            continue;
                        }
                        let iy = iy - PAD;
                        for kx in 0..KERNEL_EXTENT {
                            let ix = x + kx;
                            if ix < PAD || ix - PAD >= w {
                                continue;
                            }
                            let ix = ix - PAD;
                            let din_row =
                                &mut din_b[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                            let t = ky * KERNEL_EXTENT + kx;
                            for (co, &g) in dout_row.iter().enumerate() {
                                let kt_row = &kt[(t * cout + co) * cin..(t * cout + co + 1) * cin];
                                for (d, &wv) in din_row.iter_mut().zip(kt_row) {
                                    *d += g * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Backward pass of [`conv2d_forward`] with respect to the kernel and bias.
pub fn conv2d_backward_params(
    input: &[f32],
    ishape: [usize; 4],
    dout: &[f32],
    cout: usize,
    dkernel: &mut [f32],
    dbias: &mut [f32],
) {
    let [b, h, w, cin] = ishape;
    let in_sample = h * w * cin;
    let out_sample = h * w * cout;
    // Each (ky,kx,ci) row of the kernel gradient is owned by one task.
    dkernel
        .par_chunks_mut(cout)
        .enumerate()
        .for_each(|(row, dk_row)| {
            let ci = row % cin;
            let t = row / cin;
            let ky = t / KERNEL_EXTENT;
            let kx = t % KERNEL_EXTENT;
            for bi in 0..b {
                let in_b = &input[bi * in_sample..(bi + 1) * in_sample];
                let dout_b = &dout[bi * out_sample..(bi + 1) * out_sample];
                for y in 0..h {
                    let iy = y + ky;
                    if iy < PAD || iy - PAD >= h {
                        continue;
                    }
                    let iy = iy - PAD;
                    for x in 0..w {
                        let ix = x + kx;
                        if ix < PAD || ix - PAD >= w {
                            continue;
                        }
                        let ix = ix - PAD;
                        let v = in_b[(iy * w + ix) * cin + ci];
                        let dout_row = &dout_b[(y * w + x) * cout..(y * w + x + 1) * cout];
                        for (d, &g) in dk_row.iter_mut().zip(dout_row) {
                            *d += v * g;
                        }
                    }
                }
            }
        });
    for bi in 0..b {
        for p in 0..h * w {
            let dout_row = &dout[bi * out_sample + p * cout..bi * out_sample + (p + 1) * cout];
            for (d, &g) in dbias.iter_mut().zip(dout_row) {
                *d += g;
            }
        }
    }
}

/// 2x2 max pooling with stride 2. `argmax` receives, per output element, the
/// flat input index of the selected element (first maximum in row-major
/// window order on ties).
pub fn max_pool2x2_forward(
    input: &[f32],
    ishape: [usize; 4],
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let [_, h, w, c] = ishape;
    let (oh, ow) = (h / 2, w / 2);
    let in_sample = h * w * c;
    let out_sample = oh * ow * c;
    out.par_chunks_mut(out_sample)
        .zip(argmax.par_chunks_mut(out_sample))
        .enumerate()
        .for_each(|(bi, (out_b, arg_b))| {
            let in_b = &input[bi * in_sample..(bi + 1) * in_sample];
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for wy in 0..2 {
                            for wx in 0..2 {
                                let idx = ((2 * y + wy) * w + 2 * x + wx) * c + ch;
                                if in_b[idx] > best {
                                    best = in_b[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (y * ow + x) * c + ch;
                        out_b[o] = best;
                        arg_b[o] = (bi * in_sample + best_idx) as u32;
                    }
                }
            }
        });
}

pub fn max_pool2x2_backward(dout: &[f32], argmax: &[u32], dinput: &mut [f32]) {
    for (&g, &idx) in dout.iter().zip(argmax) {
        dinput[idx as usize] += g;
    }
}

/// Affine map `out = input . weight + bias` with `input [B,n]`, `weight [n,m]`.
pub fn dense_forward(input: &[f32], n: usize, weight: &[f32], m: usize, bias: &[f32], out: &mut [f32]) {
    out.par_chunks_mut(m)
        .zip(input.par_chunks(n))
        .for_each(|(out_row, in_row)| {
            out_row.copy_from_slice(bias);
            for (i, &v) in in_row.iter().enumerate() {
                let w_row = &weight[i * m..(i + 1) * m];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += v * wv;
                }
            }
        });
}

pub fn dense_backward_input(dout: &[f32], weight: &[f32], n: usize, m: usize, dinput: &mut [f32]) {
    // weight transposed to [m,n] for contiguous inner updates.
    let mut wt = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            wt[j * n + i] = weight[i * m + j];
        }
    }
    dinput
        .par_chunks_mut(n)
        .zip(dout.par_chunks(m))
        .for_each(|(din_row, dout_row)| {
            for (j, &g) in dout_row.iter().enumerate() {
                let wt_row = &wt[j * n..(j + 1) * n];
                for (d, &wv) in din_row.iter_mut().zip(wt_row) {
                    *d += g * wv;
                }
            }
        });
}

pub fn dense_backward_params(
    input: &[f32],
    dout: &[f32],
    n: usize,
    m: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
) {
    let b = input.len() / n;
    dweight
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, dw_row)| {
            for bi in 0..b {
                let v = input[bi * n + i];
                let dout_row = &dout[bi * m..(bi + 1) * m];
                for (d, &g) in dw_row.iter_mut().zip(dout_row) {
                    *d += v * g;
                }
            }
        });
    for bi in 0..b {
        let dout_row = &dout[bi * m..(bi + 1) * m];
        for (d, &g) in dbias.iter_mut().zip(dout_row) {
            *d += g;
        }
    }
}

pub fn relu_forward(input: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward(input: &[f32], dout: &[f32], dinput: &mut [f32]) {
    for ((d, &v), &g) in dinput.iter_mut().zip(input).zip(dout) {
        if v > 0.0 {
            *d += g;
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row standardization over the last axis followed by gain/shift.
/// Returns `(mean, inv_std)` per row for the backward pass.
pub fn layer_norm_forward(
    input: &[f32],
    n: usize,
    gain: &[f32],
    shift: &[f32],
    out: &mut [f32],
) -> Vec<(f32, f32)> {
    let rows = input.len() / n;
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let x = &input[r * n..(r + 1) * n];
        let mean = x.iter().sum::<f32>() / n as f32;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let y = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            y[i] = (x[i] - mean) * inv_std * gain[i] + shift[i];
        }
        stats.push((mean, inv_std));
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    input: &[f32],
    n: usize,
    gain: &[f32],
    stats: &[(f32, f32)],
    dout: &[f32],
    dinput: &mut [f32],
    dgain: &mut [f32],
    dshift: &mut [f32],
) {
    let rows = input.len() / n;
    for r in 0..rows {
        let (mean, inv_std) = stats[r];
        let x = &input[r * n..(r + 1) * n];
        let dy = &dout[r * n..(r + 1) * n];
        let dx = &mut dinput[r * n..(r + 1) * n];
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for i in 0..n {
            let xhat = (x[i] - mean) * inv_std;
            let dxhat = dy[i] * gain[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[i] += dy[i] * xhat;
            dshift[i] += dy[i];
        }
        let m1 = sum_dxhat / n as f32;
        let m2 = sum_dxhat_xhat / n as f32;
        for i in 0..n {
            let xhat = (x[i] - mean) * inv_std;
            let dxhat = dy[i] * gain[i];
            dx[i] += inv_std * (dxhat - m1 - xhat * m2);
        }
    }
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_forward(logits: &[f32], k: usize, out: &mut [f32]) {
    for (y, x) in out.chunks_mut(k).zip(logits.chunks(k)) {
        let max = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f32;
        for i in 0..k {
            y[i] = (x[i] - max).exp();
            sum += y[i];
        }
        for v in y.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn softmax_backward(probs: &[f32], k: usize, dout: &[f32], dinput: &mut [f32]) {
    for ((dx, y), dy) in dinput.chunks_mut(k).zip(probs.chunks(k)).zip(dout.chunks(k)) {
        let dot: f32 = dy.iter().zip(y.iter()).map(|(&g, &p)| g * p).sum();
        for i in 0..k {
            dx[i] += y[i] * (dy[i] - dot);
        }
    }
}
