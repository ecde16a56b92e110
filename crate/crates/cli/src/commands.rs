//! The pipeline stages behind the subcommands. Each stage reads the
//! previous stage's artifacts from disk and writes its own, so a run can
//! be resumed, repeated, or inspected at any point. Artifacts never embed
//! absolute paths or timestamps: rerunning a stage on identical inputs
//! and seed overwrites every output byte for byte.

use std::fmt;
use std::path::{Path, PathBuf};

use borealis_core::cluster::{
    silhouette_for_labels, silhouette_sweep, ClusterError, ClusterReport, Crosstab,
};
use borealis_core::data::{
    generate_synthetic_dataset, load_oath_dataset, read_cache, stratified_folds, write_cache,
    DataError, LABEL_NAMES,
};
use borealis_core::eval::{cross_validate, render_report, EvalError, EvalReport, Metrics};
use borealis_core::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use borealis_core::model::{build_encoder, ModelError, ProjectionHead};
use borealis_core::tensor::{l2_normalize_rows, TensorError};
use borealis_core::train::embeddings::{
    read_embeddings, write_embeddings, write_embeddings_csv, write_loss_history_csv,
};
use borealis_core::train::{extract_embeddings, train, EmbeddingSet, TrainError};
use borealis_core::util::{derive_seed, ENCODER_SEED_TAG, HEAD_SEED_TAG};

use crate::config::{EmbedSpace, RunConfig};

/// Prints one line to stdout, swallowing write errors so a closed pipe
/// (`borealis report | head`) ends the output rather than the process.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// `say!` without the trailing newline, for pre-rendered blocks.
macro_rules! show {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

/// Exit code for bad input: missing files, malformed configs or caches,
/// inconsistent shapes.
pub const EXIT_INPUT: u8 = 2;
/// Exit code for numeric failure: a loss, gradient, or statistic left the
/// reals.
pub const EXIT_NUMERIC: u8 = 3;

/// A stage failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

fn input_error(message: String) -> CliError {
    CliError {
        code: EXIT_INPUT,
        message,
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(err: crate::config::ConfigError) -> Self {
        input_error(err.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(err: DataError) -> Self {
        input_error(err.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        input_error(err.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(err: TensorError) -> Self {
        input_error(err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        input_error(err.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        let code = match err {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                EXIT_NUMERIC
            }
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        let code = match err {
            EvalError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<ClusterError> for CliError {
    fn from(err: ClusterError) -> Self {
        let code = match err {
            ClusterError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

/// Default artifact locations under the run's output directory.
pub fn cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("dataset.crds")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoint.crck")
}

pub fn embeddings_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("embeddings.crem")
}

/// Errors with exit code 2 unless `path` exists, naming the command that
/// produces it.
fn require_artifact(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(input_error(format!(
            "missing artifact {}: run `borealis {produced_by}` first",
            path.display()
        )))
    }
}

fn prepare_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    prepare_parent(path)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn class_name(label: usize) -> String {
    LABEL_NAMES
        .get(label)
        .map(|name| name.to_string())
        .unwrap_or_else(|| format!("class{label}"))
}

/// Builds the dataset cache, either from an image directory plus label
/// CSV or from the synthetic generator, and prints record and class
/// counts.
pub fn preprocess(
    cfg: &RunConfig,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    synthetic: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let images = images.or_else(|| cfg.images.clone());
    let labels = labels.or_else(|| cfg.labels.clone());
    if synthetic.is_some() && images.is_some() {
        return Err(input_error(
            "choose one dataset source: --images/--labels or --synthetic".to_string(),
        ));
    }
    let dataset = if let Some(per_class) = synthetic {
        generate_synthetic_dataset(per_class, cfg.synthetic_size, cfg.seed)?
    } else if images.is_some() || labels.is_some() {
        let images = images.ok_or_else(|| {
            input_error("--labels was given without --images (or data.images)".to_string())
        })?;
        let labels = labels.ok_or_else(|| {
            input_error("--images was given without --labels (or data.labels)".to_string())
        })?;
        let outcome = load_oath_dataset(&images, &labels, cfg.crop_border)?;
        for skip in &outcome.skipped {
            say!("skipped {}: {}", skip.source_id, skip.reason);
        }
        outcome.dataset
    } else {
        generate_synthetic_dataset(cfg.synthetic_per_class, cfg.synthetic_size, cfg.seed)?
    };

    let out = out.unwrap_or_else(|| cache_path(cfg));
    prepare_parent(&out)?;
    write_cache(&dataset, &out)?;

    say!("dataset: {} records", dataset.len());
    for (label, count) in dataset.class_counts.iter().enumerate() {
        say!("  {}: {}", class_name(label), count);
    }
    let degenerate = dataset.records.iter().filter(|r| r.degenerate).count();
    if degenerate > 0 {
        say!("  ({degenerate} degenerate after normalization)");
    }
    say!("cache written: {}", out.display());
    Ok(())
}

/// Runs contrastive training on a cached dataset, writing the checkpoint
/// and the per-epoch loss history. The resolved configuration is echoed
/// first so the run is reproducible from its log alone.
pub fn cmd_train(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let data = data.unwrap_or_else(|| cache_path(cfg));
    require_artifact(&data, "preprocess")?;

    say!("resolved configuration:");
    for line in cfg.echo().lines() {
        say!("  {line}");
    }

    let dataset = read_cache(&data)?;
    let mut encoder = build_encoder(&cfg.encoder, derive_seed(&[cfg.seed, ENCODER_SEED_TAG]))?;
    let mut head = ProjectionHead::build_head(
        encoder.representation_dim(),
        cfg.head_hidden_dim,
        cfg.head_projection_dim,
        derive_seed(&[cfg.seed, HEAD_SEED_TAG]),
    )?;
    say!(
        "training on {} records ({} encoder parameters)",
        dataset.len(),
        encoder.parameter_count()
    );

    let output = train(&dataset, &mut encoder, &mut head, &cfg.augment, &cfg.loss, &cfg.train)?;
    for (i, loss) in output.loss_history.iter().enumerate() {
        say!("epoch {}/{}: mean loss {loss:.6}", i + 1, cfg.train.epochs);
    }

    let out = out.unwrap_or_else(|| checkpoint_path(cfg));
    prepare_parent(&out)?;
    let snapshot = Checkpoint::snapshot(&encoder, &head, Vec::new(), cfg.train.epochs as u32);
    save_checkpoint(&out, &snapshot)?;
    let history = cfg.out_dir.join("loss_history.csv");
    prepare_parent(&history)?;
    write_loss_history_csv(&history, &output.loss_history)?;
    say!("checkpoint written: {}", out.display());
    say!("loss history written: {}", history.display());
    Ok(())
}

/// Embeds every cached record with a trained checkpoint, in dataset
/// order, writing the binary embedding file and its CSV mirror.
pub fn embed(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let data = data.unwrap_or_else(|| cache_path(cfg));
    let checkpoint = checkpoint.unwrap_or_else(|| checkpoint_path(cfg));
    require_artifact(&data, "preprocess")?;
    require_artifact(&checkpoint, "train")?;

    let dataset = read_cache(&data)?;
    let (encoder, head) = load_checkpoint(&checkpoint)?.restore()?;
    let mut set = extract_embeddings(&encoder, &dataset, cfg.embed_batch_size)?;
    if cfg.embed_space == EmbedSpace::Projection {
        set = EmbeddingSet {
            embeddings: head.project(&set.embeddings)?,
            labels: set.labels,
            source_ids: set.source_ids,
        };
    }

    let out = out.unwrap_or_else(|| embeddings_path(cfg));
    prepare_parent(&out)?;
    write_embeddings(&out, &set)?;
    let csv = out.with_extension("csv");
    write_embeddings_csv(&csv, &set)?;
    let space = match cfg.embed_space {
        EmbedSpace::Representation => "h",
        EmbedSpace::Projection => "z",
    };
    say!("embeddings: {} rows, dim {} (space {space})", set.len(), set.dim());
    say!("embeddings written: {}", out.display());
    say!("embeddings csv written: {}", csv.display());
    Ok(())
}

/// Per-fold CSV rows for the cross-validation outcome.
fn render_probe_folds_csv(report: &EvalReport) -> String {
    let mut out = String::from("fold,accuracy,macro_precision,macro_recall,macro_f1,converged\n");
    for (i, fold) in report.per_fold.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            fold.metrics.accuracy,
            fold.metrics.macro_precision,
            fold.metrics.macro_recall,
            fold.metrics.macro_f1,
            fold.converged
        ));
    }
    out
}

/// One fold's confusion matrix: rows are true classes, columns predicted.
fn render_confusion_csv(metrics: &Metrics) -> String {
    let classes = metrics.confusion.len();
    let mut out = String::from("true_label");
    for p in 0..classes {
        out.push_str(&format!(",pred_{p}"));
    }
    out.push('\n');
    for (t, row) in metrics.confusion.iter().enumerate() {
        out.push_str(&t.to_string());
        for count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    out
}

/// Fits the linear probe under stratified k-fold cross-validation and
/// writes the per-fold CSV, one confusion matrix CSV per fold, and the
/// text table.
pub fn probe(cfg: &RunConfig, embeddings: Option<PathBuf>) -> Result<(), CliError> {
    let embeddings = embeddings.unwrap_or_else(|| embeddings_path(cfg));
    require_artifact(&embeddings, "embed")?;

    let set = read_embeddings(&embeddings)?;
    let folds = stratified_folds(&set.labels, cfg.probe_folds, cfg.seed)?;
    let report = cross_validate(&set, &folds, &cfg.probe)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("probe_folds.csv"), &render_probe_folds_csv(&report))?;
    for (i, fold) in report.per_fold.iter().enumerate() {
        write_text(
            &cfg.out_dir.join(format!("confusion_fold{i}.csv")),
            &render_confusion_csv(&fold.metrics),
        )?;
    }
    let table = render_report(&report);
    write_text(&cfg.out_dir.join("probe_report.txt"), &table)?;

    show!("{table}");
    say!("probe artifacts written: {}", cfg.out_dir.display());
    Ok(())
}

fn render_sweep_csv(report: &ClusterReport) -> String {
    let mut out = String::from("k,mean_silhouette\n");
    for entry in &report.per_k {
        out.push_str(&format!("{},{}\n", entry.k, entry.mean_silhouette));
    }
    out
}

fn render_assignments_csv(set: &EmbeddingSet, assignments: &[usize]) -> String {
    let mut out = String::from("id,label,cluster\n");
    for i in 0..set.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            set.source_ids[i], set.labels[i], assignments[i]
        ));
    }
    out
}

fn render_crosstab_csv(crosstab: &Crosstab) -> String {
    let mut out = String::from("label");
    for cluster in 0..crosstab.k {
        out.push_str(&format!(",cluster_{cluster}"));
    }
    out.push('\n');
    for (label, row) in crosstab.counts.iter().enumerate() {
        out.push_str(&class_name(label));
        for count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    out
}

/// Text summary of a sweep: the distance convention, the per-k table,
/// the winner, the ground-truth-label silhouette, and up to a few sample
/// ids per label × cluster cell for qualitative inspection.
fn render_cluster_report(
    report: &ClusterReport,
    label_silhouette: Option<f64>,
    normalized: bool,
    restarts: usize,
    seed: u64,
) -> String {
    let space = if normalized {
        "l2-normalized embeddings"
    } else {
        "raw embeddings"
    };
    let mut out = format!("k-means sweep on {space}, euclidean distance\n");
    out.push_str(&format!("restarts per k: {restarts}, seed: {seed}\n\n"));
    out.push_str("  k   mean silhouette\n");
    for entry in &report.per_k {
        out.push_str(&format!("{:>3}   {:.6}\n", entry.k, entry.mean_silhouette));
    }
    out.push_str(&format!("\nbest k: {}\n", report.best_k));
    match label_silhouette {
        Some(value) => {
            out.push_str(&format!("ground-truth-label silhouette: {value:.6}\n"));
        }
        None => {
            out.push_str("ground-truth-label silhouette: undefined (single class)\n");
        }
    }
    out.push_str("\nsample ids per label x cluster cell:\n");
    for (label, row) in report.crosstab.samples.iter().enumerate() {
        for (cluster, ids) in row.iter().enumerate() {
            if !ids.is_empty() {
                out.push_str(&format!(
                    "  {} / cluster {}: {}\n",
                    class_name(label),
                    cluster,
                    ids.join(", ")
                ));
            }
        }
    }
    out
}

/// Sweeps k-means over a k range, scores each k by mean silhouette, and
/// writes the sweep CSV, the best-k assignments, the label × cluster
/// crosstab, and a text summary.
pub fn cluster(
    cfg: &RunConfig,
    embeddings: Option<PathBuf>,
    k_min: Option<usize>,
    k_max: Option<usize>,
) -> Result<(), CliError> {
    let embeddings = embeddings.unwrap_or_else(|| embeddings_path(cfg));
    require_artifact(&embeddings, "embed")?;
    let k_min = k_min.unwrap_or(cfg.k_min);
    let k_max = k_max.unwrap_or(cfg.k_max);

    let set = read_embeddings(&embeddings)?;
    let points = if cfg.cluster_normalize {
        l2_normalize_rows(&set.embeddings)?
    } else {
        set.embeddings.clone()
    };
    let report = silhouette_sweep(
        &points,
        &set.labels,
        &set.source_ids,
        k_min,
        k_max,
        cfg.seed,
        cfg.cluster_restarts,
        cfg.cluster_max_iter,
    )?;
    // The report still makes sense when every record shares one label;
    // only the label-silhouette comparison is undefined then.
    let label_silhouette = match silhouette_for_labels(&points, &set.labels) {
        Ok(value) => Some(value),
        Err(ClusterError::SingleCluster) => None,
        Err(err) => return Err(err.into()),
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("silhouette_sweep.csv"), &render_sweep_csv(&report))?;
    write_text(
        &cfg.out_dir.join("assignments.csv"),
        &render_assignments_csv(&set, &report.best_result.assignments),
    )?;
    write_text(&cfg.out_dir.join("crosstab.csv"), &render_crosstab_csv(&report.crosstab))?;
    let text = render_cluster_report(
        &report,
        label_silhouette,
        cfg.cluster_normalize,
        cfg.cluster_restarts,
        cfg.seed,
    );
    write_text(&cfg.out_dir.join("cluster_report.txt"), &text)?;

    show!("{text}");
    say!("cluster artifacts written: {}", cfg.out_dir.display());
    Ok(())
}

/// Collates the probe and cluster summaries into one report file.
pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let probe_path = cfg.out_dir.join("probe_report.txt");
    let cluster_path = cfg.out_dir.join("cluster_report.txt");
    require_artifact(&probe_path, "probe")?;
    require_artifact(&cluster_path, "cluster")?;
    let probe_text = std::fs::read_to_string(&probe_path)?;
    let cluster_text = std::fs::read_to_string(&cluster_path)?;

    let mut out = String::from("borealis run report\n===================\n");
    out.push_str(&format!("seed: {}\n\n", cfg.seed));
    out.push_str("-- linear probe --\n");
    out.push_str(&probe_text);
    out.push_str("\n-- cluster structure --\n");
    out.push_str(&cluster_text);

    let path = cfg.out_dir.join("report.txt");
    write_text(&path, &out)?;
    show!("{out}");
    say!("report written: {}", path.display());
    Ok(())
}
