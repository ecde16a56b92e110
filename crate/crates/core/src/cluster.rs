//! K-means over learned representations, silhouette scoring, and the
//! cluster-versus-label cross-tabulation.
//!
//! K-means uses seeded k-means++ initialization and Lloyd iterations with a
//! farthest-point repair for empty clusters; restarts keep the best inertia.
//! Silhouettes are computed by streaming pairwise distances per point
//! (O(N·K) memory, no distance matrix), which keeps the sweep affordable at
//! full-corpus scale at the cost of recomputing distances per k. Distances
//! are Euclidean on the rows exactly as given — callers decide whether to
//! normalize first.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::util::{derive_seed, mean};

/// Domain-separation tags for restart and per-k seeds.
const RESTART_TAG: u64 = 0xBE57;
const SWEEP_TAG: u64 = 0xC7A5;

/// Sample ids kept per crosstab cell by the sweep.
const SWEEP_SAMPLES_PER_CELL: usize = 3;

#[derive(Debug)]
pub enum ClusterError {
    Config { message: String },
    EmptyInput,
    /// Fewer points than clusters requested.
    TooFewPoints { points: usize, k: usize },
    /// Silhouettes need at least two non-empty clusters.
    SingleCluster,
    DimensionMismatch { expected: String, got: String },
    NonFinite { context: String },
    IndexOutOfRange { what: &'static str, value: usize, bound: usize },
}

impl fmt::Display for ClusterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterError::Config { message } => write!(f, "invalid clustering config: {message}"),
            ClusterError::EmptyInput => write!(f, "no points to cluster"),
            ClusterError::TooFewPoints { points, k } => {
                write!(f, "{points} points cannot form {k} clusters")
            }
            ClusterError::SingleCluster => {
                write!(f, "silhouette is undefined with fewer than two non-empty clusters")
            }
            ClusterError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            ClusterError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            ClusterError::IndexOutOfRange { what, value, bound } => {
                write!(f, "{what} {value} is out of range (bound {bound})")
            }
        }
    }
}

impl std::error::Error for ClusterError {}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub k: usize,
    pub dim: usize,
    /// Row-major `[k × dim]`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Total within-cluster squared Euclidean distance.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia before the first update and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn check_points(points: &Tensor) -> Result<(usize, usize), ClusterError> {
    if points.rank() != 2 {
        return Err(ClusterError::DimensionMismatch {
            expected: "a rank-2 point matrix".to_string(),
            got: format!("{:?}", points.shape()),
        });
    }
    if points.data().iter().any(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite {
            context: "points".to_string(),
        });
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if n == 0 || d == 0 {
        return Err(ClusterError::EmptyInput);
    }
    Ok((n, d))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[f64], k: usize, d: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let dd = dist2(point, &centroids[c * d..(c + 1) * d]);
        if dd < best_d {
            best_d = dd;
            best = c;
        }
    }
    (best, best_d)
}

fn assign_all(x: &[f64], n: usize, d: usize, centroids: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(n);
    let mut inertia = 0.0;
    for i in 0..n {
        let (c, dd) = nearest_centroid(&x[i * d..(i + 1) * d], centroids, k, d);
        assignments.push(c);
        inertia += dd;
    }
    (assignments, inertia)
}

/// Seeded k-means++: first centroid uniform, each next drawn with
/// probability proportional to squared distance from the chosen set.
fn seed_centroids(x: &[f64], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut nearest = vec![f64::INFINITY; n];
    for chosen in 1..k {
        let last = &centroids[(chosen - 1) * d..chosen * d];
        for i in 0..n {
            let dd = dist2(&x[i * d..(i + 1) * d], last);
            if dd < nearest[i] {
                nearest[i] = dd;
            }
        }
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &dd) in nearest.iter().enumerate() {
                target -= dd;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every remaining point coincides with a centroid; any choice
            // yields a duplicate centroid, which the contract permits.
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(&x[pick * d..(pick + 1) * d]);
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ seeding. Runs until assignments
/// stabilize or `max_iter` update rounds, always ending on an assignment
/// step so the result satisfies the Voronoi property.
pub fn kmeans(
    points: &Tensor,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult, ClusterError> {
    let (n, d) = check_points(points)?;
    if k == 0 {
        return Err(ClusterError::Config {
            message: "k must be at least 1".to_string(),
        });
    }
    if n < k {
        return Err(ClusterError::TooFewPoints { points: n, k });
    }
    if max_iter == 0 {
        return Err(ClusterError::Config {
            message: "max_iter must be at least 1".to_string(),
        });
    }
    let x = points.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(x, n, d, k, &mut rng);
    let (mut assignments, mut inertia) = assign_all(x, n, d, &centroids, k);
    let mut history = vec![inertia];
    let mut iterations = 0;

    for _ in 0..max_iter {
        // Means of the current clusters.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += x[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        // An empty cluster takes the point currently farthest from its own
        // centroid; each repair claims a distinct point.
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut farthest = None;
            let mut farthest_d = -1.0;
            for i in 0..n {
                if claimed.contains(&i) {
                    continue;
                }
                let own = assignments[i];
                let dd = dist2(&x[i * d..(i + 1) * d], &centroids[own * d..(own + 1) * d]);
                if dd > farthest_d {
                    farthest_d = dd;
                    farthest = Some(i);
                }
            }
            if let Some(i) = farthest {
                centroids[c * d..(c + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
                claimed.push(i);
            }
        }

        let (new_assignments, new_inertia) = assign_all(x, n, d, &centroids, k);
        history.push(new_inertia);
        iterations += 1;
        let converged = new_assignments == assignments;
        assignments = new_assignments;
        inertia = new_inertia;
        if converged {
            break;
        }
    }

    Ok(KMeansResult {
        k,
        dim: d,
        centroids,
        assignments,
        inertia,
        iterations_run: iterations,
        inertia_history: history,
    })
}

/// Best of `restarts` independent k-means runs by final inertia; ties keep
/// the earliest restart.
pub fn kmeans_best(
    points: &Tensor,
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<KMeansResult, ClusterError> {
    if restarts == 0 {
        return Err(ClusterError::Config {
            message: "restarts must be at least 1".to_string(),
        });
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts {
        let run = kmeans(points, k, derive_seed(&[seed, RESTART_TAG, r as u64]), max_iter)?;
        let better = match &best {
            None => true,
            Some(current) => run.inertia < current.inertia,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1 guarantees a result"))
}

/// Mean silhouette of an assignment. Per point: a = mean distance to its
/// own cluster's other members, b = smallest mean distance to another
/// non-empty cluster, s = (b−a)/max(a,b). Singletons score 0, as do points
/// where every relevant distance vanishes.
pub fn silhouette_mean(points: &Tensor, assignments: &[usize]) -> Result<f64, ClusterError> {
    let (n, d) = check_points(points)?;
    if assignments.len() != n {
        return Err(ClusterError::DimensionMismatch {
            expected: format!("{n} assignments"),
            got: format!("{}", assignments.len()),
        });
    }
    let k = match assignments.iter().max() {
        Some(&m) => m + 1,
        None => return Err(ClusterError::EmptyInput),
    };
    let mut sizes = vec![0usize; k];
    for &c in assignments {
        sizes[c] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }

    let x = points.data();
    let mut scores = Vec::with_capacity(n);
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] == 1 {
            scores.push(0.0);
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let pi = &x[i * d..(i + 1) * d];
        for (j, &cluster) in assignments.iter().enumerate() {
            if j != i {
                sums[cluster] += dist2(pi, &x[j * d..(j + 1) * d]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && sizes[c] > 0 {
                b = b.min(sums[c] / sizes[c] as f64);
            }
        }
        let denom = a.max(b);
        scores.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    Ok(mean(&scores))
}

/// Silhouette of the ground-truth labeling — the same formula with labels
/// as assignments.
pub fn silhouette_for_labels(points: &Tensor, labels: &[usize]) -> Result<f64, ClusterError> {
    silhouette_mean(points, labels)
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub k: usize,
    pub mean_silhouette: f64,
}

/// Cluster-versus-label contingency table with sample ids per cell.
#[derive(Debug, Clone)]
pub struct Crosstab {
    pub classes: usize,
    pub k: usize,
    /// `counts[label][cluster]`.
    pub counts: Vec<Vec<usize>>,
    /// Up to a few source ids per cell, in dataset order.
    pub samples: Vec<Vec<Vec<String>>>,
}

#[derive(Debug, Clone)]
pub struct ClusterReport {
    pub per_k: Vec<SweepEntry>,
    pub best_k: usize,
    pub best_result: KMeansResult,
    pub crosstab: Crosstab,
}

/// Runs k-means (with restarts) and the silhouette for every k in
/// `[k_min, k_max]`, keeping the assignment of the best-scoring k (ties to
/// the smaller k) and cross-tabulating it against the labels. Pass an empty
/// `source_ids` slice to skip per-cell samples.
#[allow(clippy::too_many_arguments)]
pub fn silhouette_sweep(
    points: &Tensor,
    labels: &[usize],
    source_ids: &[String],
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<ClusterReport, ClusterError> {
    let (n, _) = check_points(points)?;
    if k_min < 2 {
        return Err(ClusterError::Config {
            message: format!("k_min {k_min} must be at least 2"),
        });
    }
    if k_max < k_min {
        return Err(ClusterError::Config {
            message: format!("k_max {k_max} is below k_min {k_min}"),
        });
    }
    if n < k_max {
        return Err(ClusterError::TooFewPoints { points: n, k: k_max });
    }
    if labels.len() != n {
        return Err(ClusterError::DimensionMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }

    let mut per_k = Vec::with_capacity(k_max - k_min + 1);
    let mut results = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let result = kmeans_best(
            points,
            k,
            derive_seed(&[seed, SWEEP_TAG, k as u64]),
            max_iter,
            restarts,
        )?;
        let score = silhouette_mean(points, &result.assignments)?;
        per_k.push(SweepEntry {
            k,
            mean_silhouette: score,
        });
        results.push(result);
    }

    let mut best_index = 0;
    for (i, entry) in per_k.iter().enumerate() {
        if entry.mean_silhouette > per_k[best_index].mean_silhouette {
            best_index = i;
        }
    }
    let best_result = results.swap_remove(best_index);
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let crosstab = cluster_label_crosstab(
        &best_result.assignments,
        labels,
        best_result.k,
        classes,
        source_ids,
        SWEEP_SAMPLES_PER_CELL,
    )?;
    Ok(ClusterReport {
        per_k,
        best_k: best_result.k,
        best_result,
        crosstab,
    })
}

/// Counts label/cluster co-occurrences and keeps up to `samples_per_cell`
/// source ids per cell for qualitative inspection.
pub fn cluster_label_crosstab(
    assignments: &[usize],
    labels: &[usize],
    k: usize,
    classes: usize,
    source_ids: &[String],
    samples_per_cell: usize,
) -> Result<Crosstab, ClusterError> {
    if assignments.len() != labels.len() {
        return Err(ClusterError::DimensionMismatch {
            expected: format!("{} labels", assignments.len()),
            got: format!("{}", labels.len()),
        });
    }
    if !source_ids.is_empty() && source_ids.len() != assignments.len() {
        return Err(ClusterError::DimensionMismatch {
            expected: format!("{} source ids or none", assignments.len()),
            got: format!("{}", source_ids.len()),
        });
    }
    let mut counts = vec![vec![0usize; k]; classes];
    let mut samples = vec![vec![Vec::new(); k]; classes];
    for i in 0..assignments.len() {
        let cluster = assignments[i];
        let label = labels[i];
        if cluster >= k {
            return Err(ClusterError::IndexOutOfRange {
                what: "cluster",
                value: cluster,
                bound: k,
            });
        }
        if label >= classes {
            return Err(ClusterError::IndexOutOfRange {
                what: "label",
                value: label,
                bound: classes,
            });
        }
        counts[label][cluster] += 1;
        if !source_ids.is_empty() && samples[label][cluster].len() < samples_per_cell {
            samples[label][cluster].push(source_ids[i].clone());
        }
    }
    Ok(Crosstab {
        classes,
        k,
        counts,
        samples,
    })
}
