//! Spatial operations: 2-D convolution, pooling, and batch normalization.
//!
//! All operate on NCHW tensors (`[batch, channels, height, width]`).

use std::rc::Rc;

use super::ops::{finish_op, joint_tape};
use super::{GradStore, Tensor, TensorError, TensorResult};

fn require_rank4(op: &'static str, t: &Tensor) -> TensorResult<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op,
            expected: "a rank-4 NCHW tensor",
            got: t.shape().to_vec(),
        });
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn require_channel_vector(op: &'static str, t: &Tensor, channels: usize) -> TensorResult<()> {
    if t.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![channels],
        });
    }
    Ok(())
}

/// Half-open range of output columns whose input column `ox·stride + kx −
/// padding` lands inside `[0, w)`. Hoisting this bound out of the inner
/// loops lets them run over contiguous slices without per-element checks.
fn valid_ox(w: usize, ow: usize, stride: usize, padding: usize, kx: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let span = w as isize - 1 + padding as isize - kx as isize;
    if span < 0 {
        return (1, 0);
    }
    let hi = (span as usize / stride + 1).min(ow);
    if lo >= hi {
        (1, 0)
    } else {
        (lo, hi)
    }
}

/// 2-D cross-correlation of `input [B×Cin×H×W]` with `kernel
/// [Cout×Cin×kh×kw]`, using the given stride and symmetric zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> TensorResult<Tensor> {
    let (bsz, cin, h, w) = require_rank4("conv2d", input)?;
    let (cout, kcin, kh, kw) = require_rank4("conv2d", kernel)?;
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::ContractViolation {
            op: "conv2d",
            message: "stride must be at least 1".to_string(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::ContractViolation {
            op: "conv2d",
            message: format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            ),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; bsz * cout * oh * ow];
    for b in 0..bsz {
        for co in 0..cout {
            let o_plane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let x_plane = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let k_base = ((co * cin) + ci) * kh * kw;
                for ky in 0..kh {
                    let k_row = &k[k_base + ky * kw..k_base + (ky + 1) * kw];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        let o_row = &mut o_plane[oy * ow..(oy + 1) * ow];
                        // Each kernel column contributes one shifted
                        // row-to-row accumulation, which keeps the inner
                        // loop contiguous and branch-free.
                        for (kx, &kv) in k_row.iter().enumerate() {
                            let (lo, hi) = valid_ox(w, ow, stride, padding, kx);
                            if lo >= hi {
                                continue;
                            }
                            let xoff = lo * stride + kx - padding;
                            if stride == 1 {
                                let xs = &x_row[xoff..xoff + (hi - lo)];
                                for (o, xv) in o_row[lo..hi].iter_mut().zip(xs) {
                                    *o += kv * *xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    o_row[ox] += kv * x_row[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let tape = joint_tape("conv2d", &[input, kernel])?;
    let (xi, ki) = (input.track_id(), kernel.track_id());
    let (xd, kd) = (input.data_rc(), kernel.data_rc());
    Ok(finish_op(tape, vec![bsz, cout, oh, ow], out, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            let mut dx = if xi.is_some() {
                vec![0.0; bsz * cin * h * w]
            } else {
                Vec::new()
            };
            let mut dk = if ki.is_some() {
                vec![0.0; cout * cin * kh * kw]
            } else {
                Vec::new()
            };
            for b in 0..bsz {
                for co in 0..cout {
                    let g_plane = &dout[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                    for ci in 0..cin {
                        let plane_base = (b * cin + ci) * h * w;
                        let x_plane = &xd[plane_base..plane_base + h * w];
                        let k_base = ((co * cin) + ci) * kh * kw;
                        for ky in 0..kh {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row_base = iy as usize * w;
                                let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                // Mirror of the forward decomposition: per
                                // kernel column, the weight gradient is a
                                // dot product of the output-gradient row
                                // with a shifted input row, and the input
                                // gradient is the same row scaled back.
                                for kx in 0..kw {
                                    let (lo, hi) = valid_ox(w, ow, stride, padding, kx);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let xoff = lo * stride + kx - padding;
                                    let kidx = k_base + ky * kw + kx;
                                    if !dk.is_empty() {
                                        let mut acc = 0.0;
                                        if stride == 1 {
                                            let xs = &x_plane
                                                [row_base + xoff..row_base + xoff + (hi - lo)];
                                            for (g, xv) in g_row[lo..hi].iter().zip(xs) {
                                                acc += g * xv;
                                            }
                                        } else {
                                            for ox in lo..hi {
                                                acc += g_row[ox]
                                                    * x_plane
                                                        [row_base + ox * stride + kx - padding];
                                            }
                                        }
                                        dk[kidx] += acc;
                                    }
                                    if !dx.is_empty() {
                                        let kv = kd[kidx];
                                        let dx_base = plane_base + row_base;
                                        if stride == 1 {
                                            let slot = &mut dx
                                                [dx_base + xoff..dx_base + xoff + (hi - lo)];
                                            for (d, g) in slot.iter_mut().zip(&g_row[lo..hi]) {
                                                *d += kv * g;
                                            }
                                        } else {
                                            for ox in lo..hi {
                                                dx[dx_base + ox * stride + kx - padding] +=
                                                    kv * g_row[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(id) = xi {
                store.accumulate_owned(id, dx);
            }
            if let Some(id) = ki {
                store.accumulate_owned(id, dk);
            }
        })
    }))
}

/// Max pooling with a square window. Ties go to the first element in
/// row-major scan order, so backward routing is deterministic.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> TensorResult<Tensor> {
    let (bsz, c, h, w) = require_rank4("max_pool2d", input)?;
    if window == 0 || stride == 0 {
        return Err(TensorError::ContractViolation {
            op: "max_pool2d",
            message: "window and stride must be at least 1".to_string(),
        });
    }
    if h < window || w < window {
        return Err(TensorError::ContractViolation {
            op: "max_pool2d",
            message: format!("window {window} does not fit input {h}x{w}"),
        });
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = vec![0.0; bsz * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bc in 0..bsz * c {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_pos = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let pos = (oy * stride + ky) * w + ox * stride + kx;
                        if plane[pos] > best {
                            best = plane[pos];
                            best_pos = pos;
                        }
                    }
                }
                let o = bc * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = bc * h * w + best_pos;
            }
        }
    }
    let tape = joint_tape("max_pool2d", &[input])?;
    let xi = input.track_id();
    let arg = Rc::new(argmax);
    let in_len = x.len();
    Ok(finish_op(tape, vec![bsz, c, oh, ow], out, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = xi {
                let mut grad = vec![0.0; in_len];
                for (g, &pos) in dout.iter().zip(arg.iter()) {
                    grad[pos] += g;
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// Averages each channel plane to a single value: `[B×C×H×W] -> [B×C]`.
pub fn global_avg_pool(input: &Tensor) -> TensorResult<Tensor> {
    let (bsz, c, h, w) = require_rank4("global_avg_pool", input)?;
    if h * w == 0 {
        return Err(TensorError::ContractViolation {
            op: "global_avg_pool",
            message: "cannot average over an empty plane".to_string(),
        });
    }
    let x = input.data();
    let area = (h * w) as f64;
    let mut out = vec![0.0; bsz * c];
    for (bc, o) in out.iter_mut().enumerate() {
        *o = x[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / area;
    }
    let tape = joint_tape("global_avg_pool", &[input])?;
    let xi = input.track_id();
    Ok(finish_op(tape, vec![bsz, c], out, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = xi {
                let mut grad = vec![0.0; bsz * c * h * w];
                for (bc, g) in dout.iter().enumerate() {
                    let v = g / area;
                    for slot in &mut grad[bc * h * w..(bc + 1) * h * w] {
                        *slot = v;
                    }
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// Batch normalization in training mode: normalizes each channel by the
/// batch statistics, then applies the affine `gamma`/`beta`.
///
/// Returns `(normalized, batch_mean, batch_var)`; the statistics are
/// *biased* (divide by n), untracked, and intended for updating running
/// buffers. Gradients flow through the statistics into the input, as in the
/// standard batch-norm backward.
pub fn batch_norm2d_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> TensorResult<(Tensor, Tensor, Tensor)> {
    let (bsz, c, h, w) = require_rank4("batch_norm2d_train", input)?;
    require_channel_vector("batch_norm2d_train", gamma, c)?;
    require_channel_vector("batch_norm2d_train", beta, c)?;
    let n = bsz * h * w;
    if n == 0 {
        return Err(TensorError::ContractViolation {
            op: "batch_norm2d_train",
            message: "batch statistics need at least one element per channel".to_string(),
        });
    }
    let x = input.data();
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..bsz {
            let base = (b * c + ch) * plane;
            sum += x[base..base + plane].iter().sum::<f64>();
        }
        let m = sum / n as f64;
        let mut sq = 0.0;
        for b in 0..bsz {
            let base = (b * c + ch) * plane;
            for v in &x[base..base + plane] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = sq / n as f64;
    }
    let g = gamma.data();
    let bt = beta.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (gc, bc) = (g[ch], bt[ch]);
            for off in 0..plane {
                let xh = (x[base + off] - m) * is;
                xhat[base + off] = xh;
                out[base + off] = gc * xh + bc;
            }
        }
    }

    let tape = joint_tape("batch_norm2d_train", &[input, gamma, beta])?;
    let (xi, gi, bi) = (input.track_id(), gamma.track_id(), beta.track_id());
    let xhat_rc = Rc::new(xhat);
    let inv_std_rc = Rc::new(inv_std);
    let g_rc = gamma.data_rc();
    let y = finish_op(tape, input.shape().to_vec(), out, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            let nf = n as f64;
            // Per-channel sums of dout and dout·xhat drive all three grads.
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    for off in 0..plane {
                        let dy = dout[base + off];
                        sum_dy[ch] += dy;
                        sum_dy_xhat[ch] += dy * xhat_rc[base + off];
                    }
                }
            }
            if let Some(id) = gi {
                store.accumulate(id, &sum_dy_xhat);
            }
            if let Some(id) = bi {
                store.accumulate(id, &sum_dy);
            }
            if let Some(id) = xi {
                let mut dx = vec![0.0; bsz * c * plane];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let scale = g_rc[ch] * inv_std_rc[ch];
                        let mdy = sum_dy[ch] / nf;
                        let mdyx = sum_dy_xhat[ch] / nf;
                        for off in 0..plane {
                            let dy = dout[base + off];
                            dx[base + off] =
                                scale * (dy - mdy - xhat_rc[base + off] * mdyx);
                        }
                    }
                }
                store.accumulate_owned(id, dx);
            }
        })
    });
    let mean_t = Tensor::new(vec![c], mean)?;
    let var_t = Tensor::new(vec![c], var)?;
    Ok((y, mean_t, var_t))
}

/// Batch normalization in inference mode: normalizes each channel with the
/// supplied running statistics, which must be untracked constants. Each
/// sample's output depends only on that sample, so embeddings are
/// independent of batch composition.
pub fn batch_norm2d_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> TensorResult<Tensor> {
    let (bsz, c, h, w) = require_rank4("batch_norm2d_eval", input)?;
    require_channel_vector("batch_norm2d_eval", gamma, c)?;
    require_channel_vector("batch_norm2d_eval", beta, c)?;
    require_channel_vector("batch_norm2d_eval", running_mean, c)?;
    require_channel_vector("batch_norm2d_eval", running_var, c)?;
    if running_mean.is_tracked() || running_var.is_tracked() {
        return Err(TensorError::ContractViolation {
            op: "batch_norm2d_eval",
            message: "running statistics must be untracked constants".to_string(),
        });
    }
    let x = input.data();
    let plane = h * w;
    let g = gamma.data();
    let bt = beta.data();
    let rm = running_mean.data();
    let rv = running_var.data();
    let inv_std: Vec<f64> = rv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for b in 0..bsz {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (m, is) = (rm[ch], inv_std[ch]);
            let (gc, bc) = (g[ch], bt[ch]);
            for off in 0..plane {
                out[base + off] = gc * (x[base + off] - m) * is + bc;
            }
        }
    }
    let tape = joint_tape("batch_norm2d_eval", &[input, gamma, beta])?;
    let (xi, gi, bi) = (input.track_id(), gamma.track_id(), beta.track_id());
    let xd = input.data_rc();
    let g_rc = gamma.data_rc();
    let rm_rc = running_mean.data_rc();
    let inv_rc = Rc::new(inv_std);
    Ok(finish_op(tape, input.shape().to_vec(), out, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = xi {
                let mut dx = vec![0.0; bsz * c * plane];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let scale = g_rc[ch] * inv_rc[ch];
                        for off in 0..plane {
                            dx[base + off] = dout[base + off] * scale;
                        }
                    }
                }
                store.accumulate_owned(id, dx);
            }
            if let Some(id) = gi {
                let mut dg = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for off in 0..plane {
                            dg[ch] += dout[base + off]
                                * (xd[base + off] - rm_rc[ch])
                                * inv_rc[ch];
                        }
                    }
                }
                store.accumulate_owned(id, dg);
            }
            if let Some(id) = bi {
                let mut db = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for off in 0..plane {
                            db[ch] += dout[base + off];
                        }
                    }
                }
                store.accumulate_owned(id, db);
            }
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{mul, sum_all};
    use crate::tensor::Tape;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "element {i}: got {a}, expected {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // 1x1 kernel of value 1, stride 1, no padding.
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_hand_checked_3x3() {
        // 3x3 input, 2x2 kernel of ones, stride 1, no padding: each output
        // is the sum of a 2x2 window.
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let x = Tensor::zeros(vec![2, 3, 8, 8]);
        let k = Tensor::zeros(vec![5, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, 1, 1).unwrap().shape(), &[2, 5, 8, 8]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, 1, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let k_big = Tensor::zeros(vec![1, 2, 7, 7]);
        assert!(matches!(
            conv2d(&x, &k_big, 1, 0),
            Err(TensorError::ContractViolation { .. })
        ));
    }

    #[test]
    fn maxpool_takes_window_maxima() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let tape = Tape::new();
        let x = tape
            .var(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let y = max_pool2d(&x, 2, 2).unwrap();
        sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first_in_scan_order() {
        let tape = Tape::new();
        let x = tape.var(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let y = max_pool2d(&x, 2, 2).unwrap();
        sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_averages_planes() {
        let x = Tensor::new(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.5, 25.0]);
    }

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::new(vec![1], vec![1.0]).unwrap();
        let beta = Tensor::new(vec![1], vec![0.0]).unwrap();
        let (y, mean, var) = batch_norm2d_train(&x, &gamma, &beta, 0.0).unwrap();
        assert_close(mean.data(), &[2.5], 1e-12);
        assert_close(var.data(), &[1.25], 1e-12);
        // Standardized output has zero mean and unit variance.
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        let v: f64 = y.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_eval_is_per_sample_affine() {
        let gamma = Tensor::new(vec![1], vec![2.0]).unwrap();
        let beta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let rm = Tensor::new(vec![1], vec![3.0]).unwrap();
        let rv = Tensor::new(vec![1], vec![4.0]).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let y = batch_norm2d_eval(&x, &gamma, &beta, &rm, &rv, 0.0).unwrap();
        // (3-3)/2*2+1 = 1, (5-3)/2*2+1 = 3.
        assert_close(y.data(), &[1.0, 3.0], 1e-12);
    }

    #[test]
    fn batch_norm_eval_output_independent_of_batch_composition() {
        let gamma = Tensor::new(vec![1], vec![1.5]).unwrap();
        let beta = Tensor::new(vec![1], vec![-0.5]).unwrap();
        let rm = Tensor::new(vec![1], vec![0.25]).unwrap();
        let rv = Tensor::new(vec![1], vec![0.75]).unwrap();
        let solo = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.9, 0.4, 0.7]).unwrap();
        let mut batch_data = solo.data().to_vec();
        batch_data.extend_from_slice(&[0.8, 0.2, 0.6, 0.3]);
        let batch = Tensor::new(vec![2, 1, 2, 2], batch_data).unwrap();
        let y_solo = batch_norm2d_eval(&solo, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        let y_batch = batch_norm2d_eval(&batch, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        assert_eq!(&y_batch.data()[..4], y_solo.data());
    }

    #[test]
    fn batch_norm_gamma_beta_gradients_are_moment_sums() {
        // f = sum(y * w) with chosen w makes dgamma = sum(w*xhat),
        // dbeta = sum(w); check beta's, which is exact.
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let gamma = tape.var(vec![1], vec![1.0]).unwrap();
        let beta = tape.var(vec![1], vec![0.0]).unwrap();
        let (y, _, _) = batch_norm2d_train(&x, &gamma, &beta, 1e-5).unwrap();
        let w = Tensor::new(vec![2, 1, 1, 1], vec![2.0, 5.0]).unwrap();
        sum_all(&mul(&y, &w).unwrap()).unwrap().backward().unwrap();
        assert_close(&beta.grad().unwrap(), &[7.0], 1e-12);
        // xhat = [-1, 1] up to eps; dgamma = -2 + 5 = 3.
        assert_close(&gamma.grad().unwrap(), &[3.0], 1e-3);
    }
}
