//! Property-based checks for algebraic invariants that should hold on any
//! input, not just the hand-picked oracle cases.

use proptest::prelude::*;

use borealis_core::cluster::silhouette_mean;
use borealis_core::data::stratified_folds;
use borealis_core::loss::ntxent_oracle;
use borealis_core::tensor::Tensor;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("property tensor shape")
}

/// Row-major embedding matrices whose rows stay clear of the degenerate-norm
/// floor: n pairs (2n rows) of d values in [-2, -0.25] ∪ [0.25, 2].
fn embeddings(n_pairs: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    let entry = prop_oneof![0.25f64..2.0, -2.0f64..-0.25];
    proptest::collection::vec(entry, 2 * n_pairs * d)
}

fn adjacent_pairs(rows: usize) -> Vec<usize> {
    (0..rows).map(|i| i ^ 1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cosine similarities ignore row magnitude, so rescaling every
    /// embedding by the same positive constant cannot move the loss.
    #[test]
    fn ntxent_is_scale_invariant(
        data in embeddings(3, 4),
        scale in 0.05f64..20.0,
        temperature in 0.2f64..2.0,
    ) {
        let z = tensor(&[6, 4], data.clone());
        let scaled = tensor(&[6, 4], data.iter().map(|v| v * scale).collect());
        let pairs = adjacent_pairs(6);
        let base = ntxent_oracle(&z, &pairs, temperature).unwrap();
        let rescaled = ntxent_oracle(&scaled, &pairs, temperature).unwrap();
        prop_assert!(
            (base - rescaled).abs() < 1e-9,
            "loss moved under rescaling: {} vs {} (c={})",
            base, rescaled, scale
        );
    }

    /// Reordering the batch while carrying the pairing along is a pure
    /// relabeling: every directed term survives, so the mean is unchanged.
    #[test]
    fn ntxent_is_permutation_consistent(
        data in embeddings(3, 4),
        seed in any::<u64>(),
        temperature in 0.2f64..2.0,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let rows = 6;
        let d = 4;
        let pairs = adjacent_pairs(rows);
        let z = tensor(&[rows, d], data.clone());
        let base = ntxent_oracle(&z, &pairs, temperature).unwrap();

        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        // position[r] = where old row r landed in the permuted batch.
        let mut position = vec![0usize; rows];
        for (new_row, &old_row) in order.iter().enumerate() {
            position[old_row] = new_row;
        }
        let mut permuted = vec![0.0; rows * d];
        let mut permuted_pairs = vec![0usize; rows];
        for (new_row, &old_row) in order.iter().enumerate() {
            permuted[new_row * d..(new_row + 1) * d]
                .copy_from_slice(&data[old_row * d..(old_row + 1) * d]);
            permuted_pairs[new_row] = position[pairs[old_row]];
        }
        let zp = tensor(&[rows, d], permuted);
        let shuffled = ntxent_oracle(&zp, &permuted_pairs, temperature).unwrap();
        prop_assert!(
            (base - shuffled).abs() < 1e-9,
            "loss moved under permutation: {} vs {}",
            base, shuffled
        );
    }

    /// Mean silhouette is a mean of per-point values in [-1, 1].
    #[test]
    fn silhouette_stays_in_range(
        data in proptest::collection::vec(-10.0f64..10.0, 24),
        labels in proptest::collection::vec(0usize..3, 12),
    ) {
        let points = tensor(&[12, 2], data);
        let distinct = labels.iter().collect::<std::collections::HashSet<_>>().len();
        prop_assume!(distinct >= 2);
        let s = silhouette_mean(&points, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "silhouette {} out of range", s);
    }

    /// Stratified folds partition the records exactly and split every class
    /// as evenly as integer arithmetic allows.
    #[test]
    fn stratified_folds_balance_every_class(
        per_class in proptest::collection::vec(2usize..9, 4),
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(per_class.iter().all(|&n| n >= k));
        let mut labels = Vec::new();
        for (class, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat(class).take(n));
        }
        let folds = stratified_folds(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.assignments.len(), labels.len());
        prop_assert!(folds.assignments.iter().all(|&f| f < k));
        for (class, &n) in per_class.iter().enumerate() {
            let mut counts = vec![0usize; k];
            for (i, &label) in labels.iter().enumerate() {
                if label == class {
                    counts[folds.assignments[i]] += 1;
                }
            }
            let lo = n / k;
            let hi = lo + usize::from(n % k != 0);
            prop_assert!(
                counts.iter().all(|&c| c == lo || c == hi),
                "class {} split {:?} is not within one of even",
                class, counts
            );
        }
    }
}

/// Pulling a positive pair together (all else fixed) lowers its loss: the
/// directed term grows with the angle between the paired views.
#[test]
fn ntxent_rises_as_the_positive_pair_separates() {
    let mut losses = Vec::new();
    for angle in [0.3f64, 1.0, 2.0] {
        let z = tensor(
            &[4, 2],
            vec![
                1.0,
                0.0,
                angle.cos(),
                angle.sin(),
                -0.7,
                0.7,
                -0.7,
                0.6,
            ],
        );
        let loss = ntxent_oracle(&z, &[1, 0, 3, 2], 0.5).unwrap();
        losses.push(loss);
    }
    assert!(
        losses[0] < losses[1] && losses[1] < losses[2],
        "losses not increasing with pair angle: {losses:?}"
    );
}
