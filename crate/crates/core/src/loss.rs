//! Normalized temperature-scaled cross entropy (NT-Xent) over positive
//! pairs.
//!
//! For a batch of `2N` projected views, the directed loss of view `i` with
//! positive partner `j` is
//!
//! ```text
//! l(i, j) = -log( exp(sim(z_i, z_j)/t) / sum_{k != i} exp(sim(z_k, z_i)/t) )
//! ```
//!
//! where `sim` is cosine similarity and the denominator runs over every
//! other view — including the positive, excluding only `i` itself. The
//! batch loss is the mean of all `2N` directed terms. Numerical stability
//! comes from max-subtraction inside the masked log-sum-exp.

use std::fmt;

use crate::tensor::{
    div_scalar, gather1d, gather2d, l2_normalize_rows, masked_row_logsumexp, matmul_nt, mean_all,
    sub, Tensor, TensorError,
};

/// Error type for contrastive loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Temperature must be a positive finite number.
    InvalidTemperature { temperature: f64 },
    /// The pairing vector is not a fixed-point-free involution on the rows.
    InvalidPairing { message: String },
    /// Underlying tensor failure (degenerate rows, shape problems, ...).
    Tensor(TensorError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::InvalidTemperature { temperature } => {
                write!(f, "temperature {temperature} must be positive and finite")
            }
            LossError::InvalidPairing { message } => write!(f, "invalid pairing: {message}"),
            LossError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::InvalidTemperature {
                temperature: self.temperature,
            });
        }
        Ok(())
    }
}

/// Pairwise cosine similarities of the rows of `z`: `S[i][j] =
/// z_i . z_j / (|z_i| |z_j|)`. Symmetric, with a unit diagonal up to
/// floating-point rounding.
pub fn cosine_similarity_matrix(z: &Tensor) -> Result<Tensor, LossError> {
    let normalized = l2_normalize_rows(z)?;
    Ok(matmul_nt(&normalized, &normalized)?)
}

fn require_rows(z: &Tensor) -> Result<usize, LossError> {
    if z.rank() != 2 {
        return Err(LossError::Tensor(TensorError::RankMismatch {
            op: "ntxent",
            expected: "a rank-2 [views, dim] tensor",
            got: z.shape().to_vec(),
        }));
    }
    Ok(z.shape()[0])
}

fn validate_pairing(rows: usize, pair_index: &[usize]) -> Result<(), LossError> {
    if pair_index.len() != rows {
        return Err(LossError::InvalidPairing {
            message: format!("pairing has {} entries for {rows} rows", pair_index.len()),
        });
    }
    for (i, &j) in pair_index.iter().enumerate() {
        if j >= rows {
            return Err(LossError::InvalidPairing {
                message: format!("row {i} pairs with out-of-range row {j}"),
            });
        }
        if j == i {
            return Err(LossError::InvalidPairing {
                message: format!("row {i} pairs with itself"),
            });
        }
        if pair_index[j] != i {
            return Err(LossError::InvalidPairing {
                message: format!(
                    "pairing is not an involution: {i} -> {j} but {j} -> {}",
                    pair_index[j]
                ),
            });
        }
    }
    Ok(())
}

/// Mask that is 1 everywhere except the diagonal: "every view but myself".
fn off_diagonal_mask(rows: usize) -> Tensor {
    let mut data = vec![1.0; rows * rows];
    for i in 0..rows {
        data[i * rows + i] = 0.0;
    }
    Tensor::new(vec![rows, rows], data).expect("mask dims are consistent")
}

/// Shared forward graph: temperature-scaled logits and their masked
/// row-wise log-sum-exp.
fn logits_and_lse(
    z: &Tensor,
    config: &LossConfig,
    rows: usize,
) -> Result<(Tensor, Tensor), LossError> {
    let sim = cosine_similarity_matrix(z)?;
    let logits = div_scalar(&sim, config.temperature)?;
    let lse = masked_row_logsumexp(&logits, &off_diagonal_mask(rows))?;
    Ok((logits, lse))
}

/// Directed NT-Xent loss of view `i` against its positive `j`, as a scalar
/// on the tape.
pub fn ntxent_pair(
    z: &Tensor,
    i: usize,
    j: usize,
    config: &LossConfig,
) -> Result<Tensor, LossError> {
    config.validate()?;
    let rows = require_rows(z)?;
    if i >= rows || j >= rows {
        return Err(LossError::InvalidPairing {
            message: format!("pair ({i}, {j}) out of range for {rows} rows"),
        });
    }
    if i == j {
        return Err(LossError::InvalidPairing {
            message: format!("pair ({i}, {j}) uses a view as its own positive"),
        });
    }
    let (logits, lse) = logits_and_lse(z, config, rows)?;
    let pos = gather2d(&logits, &[(i, j)])?;
    let lse_i = gather1d(&lse, &[i])?;
    Ok(sub(&lse_i, &pos)?)
}

/// Batch NT-Xent: the mean of all `2N` directed pair losses, as a scalar on
/// the tape.
pub fn ntxent_batch(
    z: &Tensor,
    pair_index: &[usize],
    config: &LossConfig,
) -> Result<Tensor, LossError> {
    config.validate()?;
    let rows = require_rows(z)?;
    validate_pairing(rows, pair_index)?;
    let (logits, lse) = logits_and_lse(z, config, rows)?;
    let coords: Vec<(usize, usize)> = pair_index.iter().copied().enumerate().collect();
    let pos = gather2d(&logits, &coords)?;
    let directed = sub(&lse, &pos)?;
    Ok(mean_all(&directed)?)
}

/// Plain-loop reference evaluation of the batch NT-Xent value.
///
/// Deliberately written against raw slices — explicit dot products, explicit
/// max-subtraction — with no tape operations, so it can serve as an
/// independent oracle for [`ntxent_batch`].
pub fn ntxent_oracle(
    z: &Tensor,
    pair_index: &[usize],
    temperature: f64,
) -> Result<f64, LossError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::InvalidTemperature { temperature });
    }
    let rows = require_rows(z)?;
    validate_pairing(rows, pair_index)?;
    let d = z.shape()[1];
    let data = z.data();
    let mut unit = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::tensor::NORM_FLOOR {
            return Err(LossError::Tensor(TensorError::DegenerateRow {
                row: r,
                norm,
            }));
        }
        for (u, v) in unit[r * d..(r + 1) * d].iter_mut().zip(row) {
            *u = v / norm;
        }
    }
    let mut logits = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut dot = 0.0;
            for k in 0..d {
                dot += unit[i * d + k] * unit[j * d + k];
            }
            logits[i * rows + j] = dot / temperature;
        }
    }
    let mut total = 0.0;
    for i in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for k in 0..rows {
            if k != i && logits[i * rows + k] > max {
                max = logits[i * rows + k];
            }
        }
        let mut sum = 0.0;
        for k in 0..rows {
            if k != i {
                sum += (logits[i * rows + k] - max).exp();
            }
        }
        let lse = max + sum.ln();
        total += lse - logits[i * rows + pair_index[i]];
    }
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, Tape};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_pairs(rows: usize) -> Vec<usize> {
        (0..rows).map(|i| if i % 2 == 0 { i + 1 } else { i - 1 }).collect()
    }

    #[test]
    fn cosine_similarity_known_value() {
        // Rows [3,4] and [4,3]: cos = (12+12)/(5*5) = 0.96.
        let z = Tensor::from_rows(&[vec![3.0, 4.0], vec![4.0, 3.0]]).unwrap();
        let s = cosine_similarity_matrix(&z).unwrap();
        assert!((s.data()[1] - 0.96).abs() < 1e-12);
        assert!((s.data()[2] - 0.96).abs() < 1e-12);
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!((s.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_similarity_is_bitwise_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6 * 5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let z = Tensor::new(vec![6, 5], data).unwrap();
        let s = cosine_similarity_matrix(&z).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(s.data()[i * 6 + j], s.data()[j * 6 + i]);
            }
            assert!((s.data()[i * 6 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_derived_four_view_case() {
        // Views: e1, e1, e2, e3. For i=0, j=1 at temperature 0.5 the
        // positive logit is 2 and both negatives are 0, so
        // l(0,1) = ln((e^2 + 2) / e^2) = ln(1 + 2 e^-2).
        let z = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let cfg = LossConfig { temperature: 0.5 };
        let expected = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        let pair = ntxent_pair(&z, 0, 1, &cfg).unwrap().item().unwrap();
        assert!((pair - expected).abs() < 1e-12, "got {pair}, want {expected}");
    }

    #[test]
    fn identical_views_give_exactly_ln3() {
        // All four views identical: every logit equals 1/t, so each
        // directed loss is ln(3) regardless of temperature.
        let row = vec![0.6, 0.8];
        let z = Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let loss = ntxent_batch(&z, &default_pairs(4), &LossConfig { temperature: 0.5 })
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_temperature_flattens_toward_ln3() {
        // As t -> inf all logits go to ~0 and the loss approaches ln(3)
        // (uniform over the three candidates in each denominator).
        let z = Tensor::from_rows(&[
            vec![1.0, 0.2, -0.3],
            vec![0.9, 0.1, -0.2],
            vec![-0.5, 0.8, 0.1],
            vec![0.3, -0.7, 0.6],
        ])
        .unwrap();
        let loss = ntxent_batch(&z, &default_pairs(4), &LossConfig { temperature: 1e6 })
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-3, "got {loss}");
    }

    #[test]
    fn batch_is_mean_of_directed_pair_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..6 * 4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let z = Tensor::new(vec![6, 4], data).unwrap();
        let pairs = default_pairs(6);
        let cfg = LossConfig::default();
        let batch = ntxent_batch(&z, &pairs, &cfg).unwrap().item().unwrap();
        let mut sum = 0.0;
        for (i, &j) in pairs.iter().enumerate() {
            sum += ntxent_pair(&z, i, j, &cfg).unwrap().item().unwrap();
        }
        assert!((batch - sum / 6.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for rows in [4usize, 8, 12] {
            let data: Vec<f64> = (0..rows * 7).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let z = Tensor::new(vec![rows, 7], data).unwrap();
            let pairs = default_pairs(rows);
            let engine = ntxent_batch(&z, &pairs, &LossConfig::default())
                .unwrap()
                .item()
                .unwrap();
            let oracle = ntxent_oracle(&z, &pairs, 0.5).unwrap();
            assert!(
                (engine - oracle).abs() < 1e-12,
                "rows {rows}: engine {engine} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..4 * 3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let z = Tensor::new(vec![4, 3], data).unwrap();
        let pairs = default_pairs(4);
        let report = gradient_check(
            &|_tape: &Tape, x: &Tensor| {
                ntxent_batch(x, &pairs, &LossConfig::default()).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => crate::tensor::TensorError::ContractViolation {
                        op: "ntxent_batch",
                        message: other.to_string(),
                    },
                })
            },
            &z,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed,
            "max relative error {} at flat index {}",
            report.max_rel_error, report.worst_index
        );
    }

    #[test]
    fn stability_under_extreme_scale() {
        // Gigantic magnitudes normalize away; tiny temperature sharpens
        // logits to ±1/t without overflowing thanks to max-subtraction.
        let z = Tensor::from_rows(&[
            vec![1e8, 0.0],
            vec![1e8, 1.0],
            vec![0.0, 1e8],
            vec![1.0, 1e8],
        ])
        .unwrap();
        let loss = ntxent_batch(&z, &default_pairs(4), &LossConfig { temperature: 0.01 })
            .unwrap()
            .item()
            .unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn temperature_validation() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                ntxent_batch(&z, &[1, 0], &LossConfig { temperature: bad }),
                Err(LossError::InvalidTemperature { .. })
            ));
        }
    }

    #[test]
    fn pairing_validation() {
        let z = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, -1.0],
        ])
        .unwrap();
        let cfg = LossConfig::default();
        // Wrong length.
        assert!(matches!(
            ntxent_batch(&z, &[1, 0], &cfg),
            Err(LossError::InvalidPairing { .. })
        ));
        // Fixed point.
        assert!(matches!(
            ntxent_batch(&z, &[0, 1, 3, 2], &cfg),
            Err(LossError::InvalidPairing { .. })
        ));
        // Not an involution.
        assert!(matches!(
            ntxent_batch(&z, &[1, 2, 0, 2], &cfg),
            Err(LossError::InvalidPairing { .. })
        ));
        // Out of range.
        assert!(matches!(
            ntxent_batch(&z, &[1, 0, 9, 2], &cfg),
            Err(LossError::InvalidPairing { .. })
        ));
        // ntxent_pair with i == j.
        assert!(matches!(
            ntxent_pair(&z, 2, 2, &cfg),
            Err(LossError::InvalidPairing { .. })
        ));
    }

    #[test]
    fn zero_rows_are_rejected_as_degenerate() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            ntxent_batch(&z, &[1, 0], &LossConfig::default()),
            Err(LossError::Tensor(TensorError::DegenerateRow { row: 0, .. }))
        ));
        assert!(matches!(
            ntxent_oracle(&z, &[1, 0], 0.5),
            Err(LossError::Tensor(TensorError::DegenerateRow { row: 0, .. }))
        ));
    }
}
