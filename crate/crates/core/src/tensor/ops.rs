//! Differentiable operations on tensors.
//!
//! Every operation validates shapes eagerly, computes its result, and — when
//! any input is tracked — records a backward rule on the shared tape. Rules
//! capture input ids plus shared data handles only, never tensors.

use std::rc::Rc;

use super::tape::BackwardFn;
use super::{GradStore, Tape, Tensor, TensorError, TensorResult, Track};

/// Finds the tape shared by the tracked operands, if any. Errors if two
/// operands live on different tapes.
pub(crate) fn joint_tape(op: &'static str, inputs: &[&Tensor]) -> TensorResult<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(track) = t.track() {
            match &found {
                None => found = Some(track.tape.clone()),
                Some(tape) => {
                    if !tape.same_as(&track.tape) {
                        return Err(TensorError::TapeMismatch { op });
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Wraps a computed result: untracked when no input was tracked, otherwise
/// recorded on the tape with the supplied backward rule.
pub(crate) fn finish_op(
    tape: Option<Tape>,
    shape: Vec<usize>,
    data: Vec<f64>,
    backward: impl FnOnce() -> BackwardFn,
) -> Tensor {
    match tape {
        None => Tensor::raw(shape, data, false, None),
        Some(tape) => {
            let id = tape.fresh_id();
            tape.record(id, backward());
            Tensor::raw(
                shape,
                data,
                false,
                Some(Track { tape, id }),
            )
        }
    }
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_rank2(op: &'static str, t: &Tensor) -> TensorResult<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: "a rank-2 tensor",
            got: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// ---------------------------------------------------------------------------
// Elementwise binary operations
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    require_same_shape("add", a, b)?;
    let tape = joint_tape("add", &[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let (ai, bi) = (a.track_id(), b.track_id());
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate(id, dout);
            }
            if let Some(id) = bi {
                store.accumulate(id, dout);
            }
        })
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    require_same_shape("sub", a, b)?;
    let tape = joint_tape("sub", &[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let (ai, bi) = (a.track_id(), b.track_id());
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate(id, dout);
            }
            if let Some(id) = bi {
                store.accumulate_owned(id, dout.iter().map(|g| -g).collect());
            }
        })
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    require_same_shape("mul", a, b)?;
    let tape = joint_tape("mul", &[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ai, bi) = (a.track_id(), b.track_id());
    let (ad, bd) = (a.data_rc(), b.data_rc());
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate_owned(id, dout.iter().zip(bd.iter()).map(|(g, y)| g * y).collect());
            }
            if let Some(id) = bi {
                store.accumulate_owned(id, dout.iter().zip(ad.iter()).map(|(g, x)| g * x).collect());
            }
        })
    }))
}

pub fn div(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    require_same_shape("div", a, b)?;
    if let Some(&zero) = b.data().iter().find(|v| **v == 0.0) {
        return Err(TensorError::DomainError {
            op: "div",
            value: zero,
        });
    }
    let tape = joint_tape("div", &[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
    let (ai, bi) = (a.track_id(), b.track_id());
    let (ad, bd) = (a.data_rc(), b.data_rc());
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate_owned(id, dout.iter().zip(bd.iter()).map(|(g, y)| g / y).collect());
            }
            if let Some(id) = bi {
                let grad = dout
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

// ---------------------------------------------------------------------------
// Scalar broadcast operations
// ---------------------------------------------------------------------------

pub fn add_scalar(a: &Tensor, s: f64) -> TensorResult<Tensor> {
    let tape = joint_tape("add_scalar", &[a])?;
    let data = a.data().iter().map(|x| x + s).collect();
    let ai = a.track_id();
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate(id, dout);
            }
        })
    }))
}

pub fn sub_scalar(a: &Tensor, s: f64) -> TensorResult<Tensor> {
    add_scalar(a, -s)
}

pub fn mul_scalar(a: &Tensor, s: f64) -> TensorResult<Tensor> {
    let tape = joint_tape("mul_scalar", &[a])?;
    let data = a.data().iter().map(|x| x * s).collect();
    let ai = a.track_id();
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate_owned(id, dout.iter().map(|g| g * s).collect());
            }
        })
    }))
}

pub fn div_scalar(a: &Tensor, s: f64) -> TensorResult<Tensor> {
    if s == 0.0 {
        return Err(TensorError::DomainError {
            op: "div_scalar",
            value: 0.0,
        });
    }
    mul_scalar(a, 1.0 / s)
}

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

pub fn neg(a: &Tensor) -> TensorResult<Tensor> {
    mul_scalar(a, -1.0)
}

/// Rectified linear unit. The subgradient at exactly zero is zero.
pub fn relu(a: &Tensor) -> TensorResult<Tensor> {
    let tape = joint_tape("relu", &[a])?;
    let data = a.data().iter().map(|x| x.max(0.0)).collect();
    let ai = a.track_id();
    let ad = a.data_rc();
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                let grad = dout
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

pub fn exp(a: &Tensor) -> TensorResult<Tensor> {
    let tape = joint_tape("exp", &[a])?;
    let data: Vec<f64> = a.data().iter().map(|x| x.exp()).collect();
    let ai = a.track_id();
    let out = Rc::new(data.clone());
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate_owned(id, dout.iter().zip(out.iter()).map(|(g, e)| g * e).collect());
            }
        })
    }))
}

pub fn log(a: &Tensor) -> TensorResult<Tensor> {
    if let Some(&bad) = a.data().iter().find(|v| **v <= 0.0) {
        return Err(TensorError::DomainError {
            op: "log",
            value: bad,
        });
    }
    let tape = joint_tape("log", &[a])?;
    let data = a.data().iter().map(|x| x.ln()).collect();
    let ai = a.track_id();
    let ad = a.data_rc();
    Ok(finish_op(tape, a.shape().to_vec(), data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate_owned(id, dout.iter().zip(ad.iter()).map(|(g, x)| g / x).collect());
            }
        })
    }))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> TensorResult<Tensor> {
    let tape = joint_tape("sum_all", &[a])?;
    let total: f64 = a.data().iter().sum();
    let ai = a.track_id();
    let n = a.numel();
    Ok(finish_op(tape, vec![1], vec![total], || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                store.accumulate_owned(id, vec![dout[0]; n]);
            }
        })
    }))
}

pub fn mean_all(a: &Tensor) -> TensorResult<Tensor> {
    if a.numel() == 0 {
        return Err(TensorError::ContractViolation {
            op: "mean_all",
            message: "mean of an empty tensor is undefined".to_string(),
        });
    }
    let n = a.numel();
    div_scalar(&sum_all(a)?, n as f64)
}

/// Sums over one axis, removing it from the shape.
pub fn sum_axis(a: &Tensor, axis: usize) -> TensorResult<Tensor> {
    if axis >= a.rank() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: a.rank(),
        });
    }
    let shape = a.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    let mut data = vec![0.0; outer * inner];
    let src = a.data();
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                *d += s;
            }
        }
    }
    let tape = joint_tape("sum_axis", &[a])?;
    let ai = a.track_id();
    Ok(finish_op(tape, out_shape, data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                let mut grad = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let g = &dout[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        grad[base..base + inner].copy_from_slice(g);
                    }
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// Means over one axis, removing it from the shape.
pub fn mean_axis(a: &Tensor, axis: usize) -> TensorResult<Tensor> {
    if axis >= a.rank() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: a.rank(),
        });
    }
    let len = a.shape()[axis];
    if len == 0 {
        return Err(TensorError::ContractViolation {
            op: "mean_axis",
            message: "mean over an empty axis is undefined".to_string(),
        });
    }
    div_scalar(&sum_axis(a, axis)?, len as f64)
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m×k] · b [k×n] -> [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = matmul_kernel(a.data(), b.data(), m, k, n);
    let tape = joint_tape("matmul", &[a, b])?;
    let (ai, bi) = (a.track_id(), b.track_id());
    let (ad, bd) = (a.data_rc(), b.data_rc());
    Ok(finish_op(tape, vec![m, n], data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                // dA = dC · B^T  =>  da[i,kk] = sum_j dout[i,j] * b[kk,j]
                let mut grad = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &dout[i * n..(i + 1) * n];
                    let a_row = &mut grad[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let b_row = &bd[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for (g, bv) in g_row.iter().zip(b_row) {
                            acc += g * bv;
                        }
                        a_row[kk] = acc;
                    }
                }
                store.accumulate_owned(id, grad);
            }
            if let Some(id) = bi {
                // dB = A^T · dC  =>  db[kk,j] = sum_i a[i,kk] * dout[i,j]
                let mut grad = vec![0.0; k * n];
                for i in 0..m {
                    let g_row = &dout[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = ad[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let b_row = &mut grad[kk * n..(kk + 1) * n];
                        for (o, g) in b_row.iter_mut().zip(g_row) {
                            *o += av * g;
                        }
                    }
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// `a [m×k] · b^T` where `b` is `[n×k]`, yielding `[m×n]`. Rows of both
/// operands are contiguous, which makes this the natural layout for
/// similarity matrices.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = require_rank2("matmul_nt", a)?;
    let (n, k2) = require_rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (adata, bdata) = (a.data(), b.data());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &adata[i * k..(i + 1) * k];
        let o_row = &mut data[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            let b_row = &bdata[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    let tape = joint_tape("matmul_nt", &[a, b])?;
    let (ai, bi) = (a.track_id(), b.track_id());
    let (ad, bd) = (a.data_rc(), b.data_rc());
    Ok(finish_op(tape, vec![m, n], data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                // dA = dC · B  =>  da[i,kk] = sum_j dout[i,j] * b[j,kk]
                let mut grad = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &dout[i * n..(i + 1) * n];
                    let a_row = &mut grad[i * k..(i + 1) * k];
                    for (j, g) in g_row.iter().enumerate() {
                        if *g == 0.0 {
                            continue;
                        }
                        let b_row = &bd[j * k..(j + 1) * k];
                        for (o, bv) in a_row.iter_mut().zip(b_row) {
                            *o += g * bv;
                        }
                    }
                }
                store.accumulate_owned(id, grad);
            }
            if let Some(id) = bi {
                // dB = dC^T · A  =>  db[j,kk] = sum_i dout[i,j] * a[i,kk]
                let mut grad = vec![0.0; n * k];
                for i in 0..m {
                    let g_row = &dout[i * n..(i + 1) * n];
                    let a_row = &ad[i * k..(i + 1) * k];
                    for (j, g) in g_row.iter().enumerate() {
                        if *g == 0.0 {
                            continue;
                        }
                        let b_row = &mut grad[j * k..(j + 1) * k];
                        for (o, av) in b_row.iter_mut().zip(a_row) {
                            *o += g * av;
                        }
                    }
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

// ---------------------------------------------------------------------------
// Row normalization, masked log-sum-exp, gathers
// ---------------------------------------------------------------------------

/// Floor under which a row norm is treated as degenerate rather than
/// silently amplified into enormous gradients.
pub const NORM_FLOOR: f64 = 1e-12;

/// Normalizes each row of a rank-2 tensor to unit Euclidean norm.
pub fn l2_normalize_rows(a: &Tensor) -> TensorResult<Tensor> {
    let (n, d) = require_rank2("l2_normalize_rows", a)?;
    let src = a.data();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &src[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            return Err(TensorError::DegenerateRow { row: i, norm });
        }
        norms.push(norm);
    }
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let row = &src[i * d..(i + 1) * d];
        let out = &mut data[i * d..(i + 1) * d];
        for (o, v) in out.iter_mut().zip(row) {
            *o = v / norms[i];
        }
    }
    let tape = joint_tape("l2_normalize_rows", &[a])?;
    let ai = a.track_id();
    let out_rc = Rc::new(data.clone());
    let norms_rc = Rc::new(norms);
    Ok(finish_op(tape, vec![n, d], data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                // y = x / |x|  =>  dx = (dy - y * (y . dy)) / |x|
                let mut grad = vec![0.0; n * d];
                for i in 0..n {
                    let y = &out_rc[i * d..(i + 1) * d];
                    let dy = &dout[i * d..(i + 1) * d];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    let g = &mut grad[i * d..(i + 1) * d];
                    for j in 0..d {
                        g[j] = (dy[j] - y[j] * dot) / norms_rc[i];
                    }
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// Row-wise log-sum-exp over the entries where `mask` is 1, computed with
/// the usual max-subtraction trick for numerical stability. The mask must be
/// an untracked 0/1 tensor with at least one active entry per row; it is a
/// structural constant and receives no gradient.
pub fn masked_row_logsumexp(a: &Tensor, mask: &Tensor) -> TensorResult<Tensor> {
    let (n, m) = require_rank2("masked_row_logsumexp", a)?;
    require_same_shape("masked_row_logsumexp", a, mask)?;
    if mask.is_tracked() {
        return Err(TensorError::ContractViolation {
            op: "masked_row_logsumexp",
            message: "mask must be an untracked constant".to_string(),
        });
    }
    if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(TensorError::ContractViolation {
            op: "masked_row_logsumexp",
            message: "mask entries must be exactly 0 or 1".to_string(),
        });
    }
    let src = a.data();
    let msk = mask.data();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let row = &src[i * m..(i + 1) * m];
        let mrow = &msk[i * m..(i + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for (v, k) in row.iter().zip(mrow) {
            if *k == 1.0 && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(TensorError::ContractViolation {
                op: "masked_row_logsumexp",
                message: format!("row {i} of the mask has no active entries"),
            });
        }
        let mut sum = 0.0;
        for (v, k) in row.iter().zip(mrow) {
            if *k == 1.0 {
                sum += (*v - max).exp();
            }
        }
        data.push(max + sum.ln());
    }
    let tape = joint_tape("masked_row_logsumexp", &[a])?;
    let ai = a.track_id();
    let ad = a.data_rc();
    let md = mask.data_rc();
    let out_rc = Rc::new(data.clone());
    Ok(finish_op(tape, vec![n], data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                // d lse_i / d x_ij = mask_ij * exp(x_ij - lse_i)
                let mut grad = vec![0.0; n * m];
                for i in 0..n {
                    let row = &ad[i * m..(i + 1) * m];
                    let mrow = &md[i * m..(i + 1) * m];
                    let g = &mut grad[i * m..(i + 1) * m];
                    let lse = out_rc[i];
                    for j in 0..m {
                        if mrow[j] == 1.0 {
                            g[j] = dout[i] * (row[j] - lse).exp();
                        }
                    }
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// Gathers elements `a[r, c]` for each `(r, c)` in `coords` into a vector.
pub fn gather2d(a: &Tensor, coords: &[(usize, usize)]) -> TensorResult<Tensor> {
    let (n, m) = require_rank2("gather2d", a)?;
    for &(r, c) in coords {
        if r >= n {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather2d",
                index: r,
                bound: n,
            });
        }
        if c >= m {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather2d",
                index: c,
                bound: m,
            });
        }
    }
    let src = a.data();
    let data: Vec<f64> = coords.iter().map(|&(r, c)| src[r * m + c]).collect();
    let tape = joint_tape("gather2d", &[a])?;
    let ai = a.track_id();
    let coords_owned: Rc<Vec<(usize, usize)>> = Rc::new(coords.to_vec());
    let k = coords.len();
    Ok(finish_op(tape, vec![k], data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                let mut grad = vec![0.0; n * m];
                for (t, &(r, c)) in coords_owned.iter().enumerate() {
                    grad[r * m + c] += dout[t];
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

/// Gathers elements of a rank-1 tensor at the given indices.
pub fn gather1d(a: &Tensor, indices: &[usize]) -> TensorResult<Tensor> {
    if a.rank() != 1 {
        return Err(TensorError::RankMismatch {
            op: "gather1d",
            expected: "a rank-1 tensor",
            got: a.shape().to_vec(),
        });
    }
    let n = a.shape()[0];
    for &i in indices {
        if i >= n {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather1d",
                index: i,
                bound: n,
            });
        }
    }
    let src = a.data();
    let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
    let tape = joint_tape("gather1d", &[a])?;
    let ai = a.track_id();
    let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
    let k = indices.len();
    Ok(finish_op(tape, vec![k], data, || {
        Box::new(move |dout: &[f64], store: &mut GradStore| {
            if let Some(id) = ai {
                let mut grad = vec![0.0; n];
                for (t, &i) in idx.iter().enumerate() {
                    grad[i] += dout[t];
                }
                store.accumulate_owned(id, grad);
            }
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn elementwise_values() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![4.0, 5.0, -6.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[5.0, 3.0, -3.0]);
        assert_eq!(sub(&a, &b).unwrap().data(), &[-3.0, -7.0, 9.0]);
        assert_eq!(mul(&a, &b).unwrap().data(), &[4.0, -10.0, -18.0]);
        assert_eq!(div(&b, &a).unwrap().data(), &[4.0, -2.5, -2.0]);
        assert_eq!(relu(&a).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert_eq!(neg(&a).unwrap().data(), &[-1.0, 2.0, -3.0]);
        assert_eq!(add_scalar(&a, 1.5).unwrap().data(), &[2.5, -0.5, 4.5]);
        assert_eq!(mul_scalar(&a, -2.0).unwrap().data(), &[-2.0, 4.0, -6.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![4]);
        assert!(matches!(
            add(&a, &b),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn division_by_zero_is_a_domain_error() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(div(&a, &b), Err(TensorError::DomainError { .. })));
        assert!(matches!(
            div_scalar(&a, 0.0),
            Err(TensorError::DomainError { .. })
        ));
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(log(&a), Err(TensorError::DomainError { .. })));
    }

    #[test]
    fn reductions() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sum_all(&a).unwrap().item().unwrap(), 10.0);
        assert_eq!(mean_all(&a).unwrap().item().unwrap(), 2.5);
        let col_sums = sum_axis(&a, 0).unwrap();
        assert_eq!(col_sums.shape(), &[2]);
        assert_eq!(col_sums.data(), &[4.0, 6.0]);
        let row_means = mean_axis(&a, 1).unwrap();
        assert_eq!(row_means.data(), &[1.5, 3.5]);
        assert!(matches!(
            sum_axis(&a, 2),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn gradient_of_mean_is_uniform() {
        let tape = Tape::new();
        let x = tape.var(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        mean_all(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn matmul_known_product() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap();
        let bt = Tensor::new(
            vec![3, 4],
            vec![0.0, 3.0, 6.0, 9.0, 1.0, 4.0, 7.0, 10.0, 2.0, 5.0, 8.0, 11.0],
        )
        .unwrap();
        let via_nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &bt).unwrap();
        assert_eq!(via_nt.data(), via_t.data());
        assert_eq!(via_nt.shape(), &[2, 4]);
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // f = sum(A·B); dA = ones · B^T, dB = A^T · ones.
        let tape = Tape::new();
        let a = tape.var(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.var(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        sum_all(&matmul(&a, &b).unwrap())
            .unwrap()
            .backward()
            .unwrap();
        assert_close(&a.grad().unwrap(), &[11.0, 15.0, 11.0, 15.0], 1e-12);
        assert_close(&b.grad().unwrap(), &[4.0, 4.0, 6.0, 6.0], 1e-12);
    }

    #[test]
    fn l2_normalize_rows_produces_unit_norms() {
        let a = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        let n = l2_normalize_rows(&a).unwrap();
        assert_close(n.data(), &[0.6, 0.8, 0.0, 1.0], 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_degenerate_rows() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            l2_normalize_rows(&a),
            Err(TensorError::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn masked_logsumexp_matches_direct_evaluation() {
        // Row [0, ln 2, ln 3] with mask [0,1,1]: lse = ln(2 + 3) = ln 5.
        let a = Tensor::new(vec![1, 3], vec![0.0, 2f64.ln(), 3f64.ln()]).unwrap();
        let mask = Tensor::new(vec![1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        let lse = masked_row_logsumexp(&a, &mask).unwrap();
        assert_close(lse.data(), &[5f64.ln()], 1e-14);
    }

    #[test]
    fn masked_logsumexp_is_stable_for_large_logits() {
        let a = Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap();
        let mask = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let lse = masked_row_logsumexp(&a, &mask).unwrap();
        assert_close(lse.data(), &[1000.0 + 2f64.ln()], 1e-10);
    }

    #[test]
    fn masked_logsumexp_rejects_empty_rows_and_bad_masks() {
        let a = Tensor::zeros(vec![1, 2]);
        let empty = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            masked_row_logsumexp(&a, &empty),
            Err(TensorError::ContractViolation { .. })
        ));
        let fractional = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            masked_row_logsumexp(&a, &fractional),
            Err(TensorError::ContractViolation { .. })
        ));
    }

    #[test]
    fn gathers_select_and_scatter() {
        let tape = Tape::new();
        let x = tape.var(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let picked = gather2d(&x, &[(0, 2), (1, 0)]).unwrap();
        assert_eq!(picked.data(), &[3.0, 4.0]);
        sum_all(&picked).unwrap().backward().unwrap();
        assert_eq!(
            x.grad().unwrap(),
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );

        let v = Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap();
        assert_eq!(gather1d(&v, &[2, 2, 0]).unwrap().data(), &[9.0, 9.0, 7.0]);
        assert!(matches!(
            gather1d(&v, &[3]),
            Err(TensorError::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(vec![1], vec![1.0]).unwrap();
        let b = t2.var(vec![1], vec![2.0]).unwrap();
        assert_eq!(
            add(&a, &b).unwrap_err(),
            TensorError::TapeMismatch { op: "add" }
        );
    }

    #[test]
    fn chain_rule_through_a_small_composite() {
        // f(x) = mean(relu(x)^2) on x = [-1, 2]: f = (0 + 4)/2 = 2,
        // df/dx = [0, 2·2/2] = [0, 2].
        let tape = Tape::new();
        let x = tape.var(vec![2], vec![-1.0, 2.0]).unwrap();
        let r = relu(&x).unwrap();
        let sq = mul(&r, &r).unwrap();
        let f = mean_all(&sq).unwrap();
        assert_eq!(f.item().unwrap(), 2.0);
        f.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert!(!c.is_tracked());
    }

    #[test]
    fn diamond_dataflow_accumulates_both_paths() {
        // f = sum(x * x) via two uses of x: df/dx = 2x.
        let tape = Tape::new();
        let x = tape.var(vec![2], vec![3.0, -5.0]).unwrap();
        let y = mul(&x, &x).unwrap();
        sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -10.0]);
    }
}
