//! The linear probe: ℓ2-regularized multinomial logistic regression fit on
//! frozen embeddings, k-fold cross-validation, and classification metrics.
//!
//! The probe is solved by full-batch gradient descent with Armijo
//! backtracking from a zero initialization — deterministic, dependency-free,
//! and entirely adequate at the row counts embeddings reach here. Weights
//! are regularized; biases are not. Metrics are macro-averaged over every
//! class, counting a class with no predicted positives as precision 0 (the
//! affected classes are reported, not silently absorbed).

use std::fmt;

use crate::data::FoldSplit;
use crate::tensor::Tensor;
use crate::train::EmbeddingSet;
use crate::util::{mean, population_std};

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;
/// Maximum step halvings per line search.
const MAX_BACKTRACKS: usize = 30;

#[derive(Debug)]
pub enum EvalError {
    Config { message: String },
    EmptyInput,
    DimensionMismatch { expected: String, got: String },
    /// Embeddings fed to the probe must be finite.
    NonFinite { context: String },
    LabelOutOfRange { label: usize, classes: usize },
    /// Fewer rows than classes — the probe cannot even be posed.
    TooFewSamples { samples: usize, classes: usize },
    /// A training split is missing a class entirely.
    ClassMissing { class: usize, fold: usize },
    FoldMismatch { records: usize, assignments: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Config { message } => write!(f, "invalid probe config: {message}"),
            EvalError::EmptyInput => write!(f, "no samples to evaluate"),
            EvalError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            EvalError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            EvalError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} is out of range for {classes} classes")
            }
            EvalError::TooFewSamples { samples, classes } => {
                write!(f, "{samples} samples cannot cover {classes} classes")
            }
            EvalError::ClassMissing { class, fold } => write!(
                f,
                "training split for fold {fold} contains no examples of class {class}"
            ),
            EvalError::FoldMismatch {
                records,
                assignments,
            } => write!(
                f,
                "fold assignment covers {assignments} records but the embedding set has {records}"
            ),
        }
    }
}

impl std::error::Error for EvalError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    /// Initial line-search step; backtracking halves from here.
    pub optimizer_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_strength: 1e-3,
            max_iterations: 500,
            convergence_tol: 1e-6,
            optimizer_lr: 1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let config = |message: String| Err(EvalError::Config { message });
        if !(self.l2_strength >= 0.0 && self.l2_strength.is_finite()) {
            return config(format!("l2_strength {} must be non-negative", self.l2_strength));
        }
        if self.max_iterations == 0 {
            return config("max_iterations must be at least 1".to_string());
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return config(format!(
                "convergence_tol {} must be positive",
                self.convergence_tol
            ));
        }
        if !(self.optimizer_lr > 0.0 && self.optimizer_lr.is_finite()) {
            return config(format!("optimizer_lr {} must be positive", self.optimizer_lr));
        }
        Ok(())
    }
}

/// A fitted probe: row-major weights `[d × C]` plus per-class biases.
#[derive(Debug, Clone)]
pub struct LogReg {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value at the start and after every accepted step.
    pub objective_history: Vec<f64>,
}

/// Predicted labels with the full probability rows they came from.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Row-major `[n × C]`.
    pub probabilities: Vec<f64>,
}

/// Per-fold classification quality.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[t][p]` counts true class t predicted as p.
    pub confusion: Vec<Vec<usize>>,
    /// Classes that received no predicted positives (precision counted 0).
    pub zero_predicted_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub metrics: Metrics,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_fold: Vec<FoldOutcome>,
    pub accuracy: MetricSummary,
    pub macro_precision: MetricSummary,
    pub macro_recall: MetricSummary,
    pub macro_f1: MetricSummary,
    pub classes: usize,
}

fn check_matrix(embeddings: &Tensor) -> Result<(usize, usize), EvalError> {
    if embeddings.rank() != 2 {
        return Err(EvalError::DimensionMismatch {
            expected: "a rank-2 embedding matrix".to_string(),
            got: format!("{:?}", embeddings.shape()),
        });
    }
    if embeddings.data().iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite {
            context: "embeddings".to_string(),
        });
    }
    Ok((embeddings.shape()[0], embeddings.shape()[1]))
}

/// Row-wise softmax probabilities and per-row log-partition values for
/// logits `x·W + b`.
fn forward_probs(
    x: &[f64],
    n: usize,
    d: usize,
    classes: usize,
    weights: &[f64],
    biases: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; n * classes];
    let mut log_norms = vec![0.0; n];
    let mut logits = vec![0.0; classes];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        for (c, logit) in logits.iter_mut().enumerate() {
            let mut acc = biases[c];
            for (j, &v) in row.iter().enumerate() {
                acc += v * weights[j * classes + c];
            }
            *logit = acc;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in &logits {
            sum += (l - max).exp();
        }
        let lse = max + sum.ln();
        log_norms[i] = lse;
        for c in 0..classes {
            probs[i * classes + c] = (logits[c] - lse).exp();
        }
    }
    (probs, log_norms)
}

/// Mean cross-entropy plus the ℓ2 term, computed from softmax outputs.
fn objective_value(
    probs: &[f64],
    labels: &[usize],
    classes: usize,
    weights: &[f64],
    l2: f64,
) -> f64 {
    let n = labels.len();
    let mut ce = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        // p > 0 always: softmax of finite logits.
        ce -= probs[i * classes + label].ln();
    }
    let penalty: f64 = weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
    ce / n as f64 + penalty
}

/// Fits the probe by full-batch gradient descent with backtracking.
pub fn fit_logreg(
    embeddings: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LogReg, EvalError> {
    cfg.validate()?;
    let (n, d) = check_matrix(embeddings)?;
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    if labels.len() != n {
        return Err(EvalError::DimensionMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if classes == 0 {
        return Err(EvalError::Config {
            message: "at least one class is required".to_string(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(EvalError::LabelOutOfRange { label, classes });
    }
    if n < classes {
        return Err(EvalError::TooFewSamples {
            samples: n,
            classes,
        });
    }

    let x = embeddings.data();
    let mut weights = vec![0.0; d * classes];
    let mut biases = vec![0.0; classes];
    let mut converged = false;
    let mut iterations = 0;

    let (mut probs, _) = forward_probs(x, n, d, classes, &weights, &biases);
    let mut objective = objective_value(&probs, labels, classes, &weights, cfg.l2_strength);
    let mut history = vec![objective];

    for _ in 0..cfg.max_iterations {
        // ∇ of mean cross-entropy: Xᵀ(P − Y)/n, plus λW on the weights.
        let mut grad_w = vec![0.0; d * classes];
        let mut grad_b = vec![0.0; classes];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            for c in 0..classes {
                let mut delta = probs[i * classes + c];
                if labels[i] == c {
                    delta -= 1.0;
                }
                let delta = delta / n as f64;
                grad_b[c] += delta;
                for (j, &v) in row.iter().enumerate() {
                    grad_w[j * classes + c] += delta * v;
                }
            }
        }
        for (g, w) in grad_w.iter_mut().zip(&weights) {
            *g += cfg.l2_strength * w;
        }
        let grad_sq: f64 = grad_w.iter().chain(&grad_b).map(|g| g * g).sum();
        if grad_sq.sqrt() < cfg.convergence_tol {
            converged = true;
            break;
        }

        let mut step = cfg.optimizer_lr;
        let mut accepted = false;
        for _ in 0..=MAX_BACKTRACKS {
            let trial_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - step * g)
                .collect();
            let trial_b: Vec<f64> = biases
                .iter()
                .zip(&grad_b)
                .map(|(b, g)| b - step * g)
                .collect();
            let (trial_probs, _) = forward_probs(x, n, d, classes, &trial_w, &trial_b);
            let trial_objective =
                objective_value(&trial_probs, labels, classes, &trial_w, cfg.l2_strength);
            if trial_objective <= objective - ARMIJO_C * step * grad_sq {
                weights = trial_w;
                biases = trial_b;
                probs = trial_probs;
                objective = trial_objective;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            // The line search bottomed out: the iterate is numerically at a
            // stationary point even though the gradient-norm test missed.
            break;
        }
        iterations += 1;
        history.push(objective);
    }

    Ok(LogReg {
        weights,
        biases,
        dim: d,
        classes,
        converged,
        iterations,
        objective_history: history,
    })
}

/// Applies a fitted probe. Ties in the probability row break toward the
/// lowest class index.
pub fn predict(model: &LogReg, embeddings: &Tensor) -> Result<Prediction, EvalError> {
    let (n, d) = check_matrix(embeddings)?;
    if d != model.dim {
        return Err(EvalError::DimensionMismatch {
            expected: format!("{}-dimensional embeddings", model.dim),
            got: format!("{d}"),
        });
    }
    let (probabilities, _) = forward_probs(
        embeddings.data(),
        n,
        d,
        model.classes,
        &model.weights,
        &model.biases,
    );
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = &probabilities[i * model.classes..(i + 1) * model.classes];
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        labels.push(best);
    }
    Ok(Prediction {
        labels,
        probabilities,
    })
}

/// Confusion matrix, accuracy, and macro-averaged precision/recall/F1 over
/// all `classes` classes. Absent denominators contribute 0 to the macro
/// averages.
pub fn classification_metrics(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<Metrics, EvalError> {
    if y_true.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if y_true.len() != y_pred.len() {
        return Err(EvalError::DimensionMismatch {
            expected: format!("{} predictions", y_true.len()),
            got: format!("{}", y_pred.len()),
        });
    }
    if let Some(&label) = y_true.iter().chain(y_pred).find(|&&l| l >= classes) {
        return Err(EvalError::LabelOutOfRange { label, classes });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let total = y_true.len() as f64;
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = trace as f64 / total;

    let mut precisions = Vec::with_capacity(classes);
    let mut recalls = Vec::with_capacity(classes);
    let mut f1s = Vec::with_capacity(classes);
    let mut zero_predicted = Vec::new();
    for c in 0..classes {
        let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let hit = confusion[c][c] as f64;
        let precision = if predicted > 0 {
            hit / predicted as f64
        } else {
            zero_predicted.push(c);
            0.0
        };
        let recall = if actual > 0 { hit / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        precisions.push(precision);
        recalls.push(recall);
        f1s.push(f1);
    }
    Ok(Metrics {
        accuracy,
        macro_precision: mean(&precisions),
        macro_recall: mean(&recalls),
        macro_f1: mean(&f1s),
        confusion,
        zero_predicted_classes: zero_predicted,
    })
}

/// Fits one probe per fold (on the fold's complement) and aggregates the
/// test metrics. Class count is taken as max label + 1 over the whole set.
pub fn cross_validate(
    embset: &EmbeddingSet,
    folds: &FoldSplit,
    cfg: &ProbeConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let n = embset.len();
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    if folds.assignments.len() != n {
        return Err(EvalError::FoldMismatch {
            records: n,
            assignments: folds.assignments.len(),
        });
    }
    let classes = embset.labels.iter().max().copied().unwrap_or(0) + 1;
    let d = embset.dim();

    let mut per_fold = Vec::with_capacity(folds.k);
    let mut accuracies = Vec::with_capacity(folds.k);
    let mut precisions = Vec::with_capacity(folds.k);
    let mut recalls = Vec::with_capacity(folds.k);
    let mut f1s = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let mut train_rows = Vec::new();
        let mut train_labels = Vec::new();
        let mut test_rows = Vec::new();
        let mut test_labels = Vec::new();
        for i in 0..n {
            if folds.assignments[i] == fold {
                test_rows.extend_from_slice(embset.row(i));
                test_labels.push(embset.labels[i]);
            } else {
                train_rows.extend_from_slice(embset.row(i));
                train_labels.push(embset.labels[i]);
            }
        }
        if test_labels.is_empty() {
            return Err(EvalError::Config {
                message: format!("fold {fold} has no test records"),
            });
        }
        for class in 0..classes {
            if !train_labels.contains(&class) {
                return Err(EvalError::ClassMissing { class, fold });
            }
        }
        let train_x = Tensor::new(vec![train_labels.len(), d], train_rows)
            .expect("row slices always fill the matrix");
        let test_x = Tensor::new(vec![test_labels.len(), d], test_rows)
            .expect("row slices always fill the matrix");
        let model = fit_logreg(&train_x, &train_labels, classes, cfg)?;
        let prediction = predict(&model, &test_x)?;
        let metrics = classification_metrics(&test_labels, &prediction.labels, classes)?;
        accuracies.push(metrics.accuracy);
        precisions.push(metrics.macro_precision);
        recalls.push(metrics.macro_recall);
        f1s.push(metrics.macro_f1);
        per_fold.push(FoldOutcome {
            metrics,
            converged: model.converged,
        });
    }
    let summary = |values: &[f64]| MetricSummary {
        mean: mean(values),
        std: population_std(values),
    };
    Ok(EvalReport {
        per_fold,
        accuracy: summary(&accuracies),
        macro_precision: summary(&precisions),
        macro_recall: summary(&recalls),
        macro_f1: summary(&f1s),
        classes,
    })
}

/// Text table over the cross-validation summary. Metrics are macro
/// averages; the header says so explicitly.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("linear probe, k-fold cross-validation (macro-averaged metrics)\n");
    out.push_str("fold  accuracy  precision  recall    f1        converged\n");
    for (i, fold) in report.per_fold.iter().enumerate() {
        out.push_str(&format!(
            "{:<5} {:<9.4} {:<10.4} {:<9.4} {:<9.4} {}\n",
            i,
            fold.metrics.accuracy,
            fold.metrics.macro_precision,
            fold.metrics.macro_recall,
            fold.metrics.macro_f1,
            fold.converged
        ));
    }
    out.push_str(&format!(
        "mean  {:<9.4} {:<10.4} {:<9.4} {:<9.4}\n",
        report.accuracy.mean,
        report.macro_precision.mean,
        report.macro_recall.mean,
        report.macro_f1.mean
    ));
    out.push_str(&format!(
        "std   {:<9.4} {:<10.4} {:<9.4} {:<9.4}\n",
        report.accuracy.std,
        report.macro_precision.std,
        report.macro_recall.std,
        report.macro_f1.std
    ));
    out
}
