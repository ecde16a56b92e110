//! Flat `section.key = value` run configuration.
//!
//! One plain-text file carries every stage's knobs, one line per setting,
//! with `#` comment lines — trivially diffable and greppable. Unknown and
//! duplicate keys are rejected outright so a typo cannot silently fall
//! back to a default. Every key has a default tuned to the synthetic
//! desk-scale recipe, so an empty file (or none at all) yields a run that
//! trains end to end in minutes on one core.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use borealis_core::augment::{AugmentConfig, FlipAxis};
use borealis_core::eval::ProbeConfig;
use borealis_core::loss::LossConfig;
use borealis_core::model::{EncoderConfig, NormMode};
use borealis_core::train::TrainConfig;

/// Which representation the embed stage exports: the encoder output h or
/// the projection-head output z.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedSpace {
    Representation,
    Projection,
}

impl EmbedSpace {
    fn as_str(self) -> &'static str {
        match self {
            EmbedSpace::Representation => "h",
            EmbedSpace::Projection => "z",
        }
    }
}

/// Everything a full pipeline run needs, resolved from defaults, then an
/// optional config file, then command-line overrides — in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Base seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    /// Directory stage artifacts are written to and read from.
    pub out_dir: PathBuf,
    /// Image directory for a real corpus; `None` selects the synthetic set.
    pub images: Option<PathBuf>,
    /// `filename,label` CSV accompanying `images`.
    pub labels: Option<PathBuf>,
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
    /// Border fraction cropped from real images before normalization.
    pub crop_border: f64,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub head_hidden_dim: usize,
    pub head_projection_dim: usize,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub embed_space: EmbedSpace,
    pub embed_batch_size: usize,
    pub probe_folds: usize,
    pub probe: ProbeConfig,
    pub k_min: usize,
    pub k_max: usize,
    pub cluster_restarts: usize,
    pub cluster_max_iter: usize,
    /// L2-normalize embedding rows before clustering.
    pub cluster_normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::desk();
        let head_hidden_dim = encoder.representation_dim();
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("artifacts"),
            images: None,
            labels: None,
            synthetic_per_class: 30,
            synthetic_size: 48,
            crop_border: 0.15,
            augment: AugmentConfig::default(),
            encoder,
            head_hidden_dim,
            head_projection_dim: 64,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            embed_space: EmbedSpace::Representation,
            embed_batch_size: 64,
            probe_folds: 5,
            probe: ProbeConfig::default(),
            k_min: 3,
            k_max: 15,
            cluster_restarts: 10,
            cluster_max_iter: 100,
            cluster_normalize: false,
        }
    }
}

impl RunConfig {
    /// Applies command-line overrides and syncs the trainer's seed to the
    /// run seed, which is the single source of randomness.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> RunConfig {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        }
        self.train.seed = self.seed;
        self
    }

    /// Canonical listing of every setting, one `section.key = value` line
    /// per setting. The output is itself a valid config file.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| match p {
            Some(p) => p.display().to_string(),
            None => String::new(),
        };
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let norm = match self.encoder.norm {
            NormMode::Batch => "batch",
            NormMode::None => "none",
        };
        let flip = match self.augment.flip_axis {
            FlipAxis::Horizontal => "horizontal",
            FlipAxis::Vertical => "vertical",
            FlipAxis::None => "none",
        };
        let mut out = String::new();
        let mut line = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        line("run.seed", self.seed.to_string());
        line("run.out_dir", self.out_dir.display().to_string());
        line("data.images", path(&self.images));
        line("data.labels", path(&self.labels));
        line("data.synthetic_per_class", self.synthetic_per_class.to_string());
        line("data.synthetic_size", self.synthetic_size.to_string());
        line("data.crop_border", self.crop_border.to_string());
        line("augment.crop_scale_min", self.augment.crop_scale_min.to_string());
        line("augment.crop_scale_max", self.augment.crop_scale_max.to_string());
        line("augment.output_size", self.augment.output_size.to_string());
        line("augment.flip_axis", flip.to_string());
        line("augment.flip_probability", self.augment.flip_probability.to_string());
        line("encoder.stage_channels", list(&self.encoder.stage_channels));
        line("encoder.blocks_per_stage", list(&self.encoder.blocks_per_stage));
        line("encoder.input_size", self.encoder.input_size.to_string());
        line("encoder.norm", norm.to_string());
        line("encoder.head_hidden_dim", self.head_hidden_dim.to_string());
        line("encoder.head_projection_dim", self.head_projection_dim.to_string());
        line("loss.temperature", self.loss.temperature.to_string());
        line("train.learning_rate", self.train.learning_rate.to_string());
        line("train.beta1", self.train.beta1.to_string());
        line("train.beta2", self.train.beta2.to_string());
        line("train.epsilon", self.train.epsilon.to_string());
        line("train.weight_decay", self.train.weight_decay.to_string());
        line("train.epochs", self.train.epochs.to_string());
        line("train.batch_size", self.train.batch_size.to_string());
        line("embed.space", self.embed_space.as_str().to_string());
        line("embed.batch_size", self.embed_batch_size.to_string());
        line("probe.folds", self.probe_folds.to_string());
        line("probe.l2_strength", self.probe.l2_strength.to_string());
        line("probe.max_iterations", self.probe.max_iterations.to_string());
        line("probe.convergence_tol", self.probe.convergence_tol.to_string());
        line("probe.optimizer_lr", self.probe.optimizer_lr.to_string());
        line("cluster.k_min", self.k_min.to_string());
        line("cluster.k_max", self.k_max.to_string());
        line("cluster.restarts", self.cluster_restarts.to_string());
        line("cluster.max_iter", self.cluster_max_iter.to_string());
        line("cluster.normalize", self.cluster_normalize.to_string());
        out
    }
}

/// A malformed config file, with the offending line number when there is
/// one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Reads and parses `path` over the defaults; `None` yields the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError {
            line: None,
            message: format!("{}: {err}", path.display()),
        })?;
        apply_config(&mut cfg, &text)?;
    }
    Ok(cfg)
}

/// Parses config text onto `cfg`. Blank lines and lines starting with `#`
/// are skipped; everything else must be a known `section.key = value`
/// line, each key at most once.
pub fn apply_config(cfg: &mut RunConfig, text: &str) -> Result<(), ConfigError> {
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let at = |message: String| ConfigError {
            line: Some(line),
            message,
        };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| at(format!("expected `section.key = value`, got `{trimmed}`")))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(at(format!("duplicate key `{key}`")));
        }
        set_key(cfg, key, value).map_err(at)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` needs {kind}, got `{value}`"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|item| {
            item.trim()
                .parse()
                .map_err(|_| format!("`{key}` needs comma-separated integers, got `{value}`"))
        })
        .collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "run.seed" => cfg.seed = parse(key, value, "an unsigned integer")?,
        "run.out_dir" => {
            if value.is_empty() {
                return Err("`run.out_dir` must not be empty".to_string());
            }
            cfg.out_dir = PathBuf::from(value);
        }
        "data.images" => cfg.images = parse_path(value),
        "data.labels" => cfg.labels = parse_path(value),
        "data.synthetic_per_class" => {
            cfg.synthetic_per_class = parse(key, value, "an unsigned integer")?
        }
        "data.synthetic_size" => cfg.synthetic_size = parse(key, value, "an unsigned integer")?,
        "data.crop_border" => cfg.crop_border = parse(key, value, "a number")?,
        "augment.crop_scale_min" => cfg.augment.crop_scale_min = parse(key, value, "a number")?,
        "augment.crop_scale_max" => cfg.augment.crop_scale_max = parse(key, value, "a number")?,
        "augment.output_size" => cfg.augment.output_size = parse(key, value, "an unsigned integer")?,
        "augment.flip_axis" => {
            cfg.augment.flip_axis = match value {
                "horizontal" => FlipAxis::Horizontal,
                "vertical" => FlipAxis::Vertical,
                "none" => FlipAxis::None,
                other => {
                    return Err(format!(
                        "`augment.flip_axis` must be horizontal, vertical, or none, got `{other}`"
                    ))
                }
            }
        }
        "augment.flip_probability" => {
            cfg.augment.flip_probability = parse(key, value, "a number")?
        }
        "encoder.stage_channels" => cfg.encoder.stage_channels = parse_list(key, value)?,
        "encoder.blocks_per_stage" => cfg.encoder.blocks_per_stage = parse_list(key, value)?,
        "encoder.input_size" => cfg.encoder.input_size = parse(key, value, "an unsigned integer")?,
        "encoder.norm" => {
            cfg.encoder.norm = match value {
                "batch" => NormMode::Batch,
                "none" => NormMode::None,
                other => {
                    return Err(format!("`encoder.norm` must be batch or none, got `{other}`"))
                }
            }
        }
        "encoder.head_hidden_dim" => {
            cfg.head_hidden_dim = parse(key, value, "an unsigned integer")?
        }
        "encoder.head_projection_dim" => {
            cfg.head_projection_dim = parse(key, value, "an unsigned integer")?
        }
        "loss.temperature" => cfg.loss.temperature = parse(key, value, "a number")?,
        "train.learning_rate" => cfg.train.learning_rate = parse(key, value, "a number")?,
        "train.beta1" => cfg.train.beta1 = parse(key, value, "a number")?,
        "train.beta2" => cfg.train.beta2 = parse(key, value, "a number")?,
        "train.epsilon" => cfg.train.epsilon = parse(key, value, "a number")?,
        "train.weight_decay" => cfg.train.weight_decay = parse(key, value, "a number")?,
        "train.epochs" => cfg.train.epochs = parse(key, value, "an unsigned integer")?,
        "train.batch_size" => cfg.train.batch_size = parse(key, value, "an unsigned integer")?,
        "embed.space" => {
            cfg.embed_space = match value {
                "h" => EmbedSpace::Representation,
                "z" => EmbedSpace::Projection,
                other => return Err(format!("`embed.space` must be h or z, got `{other}`")),
            }
        }
        "embed.batch_size" => cfg.embed_batch_size = parse(key, value, "an unsigned integer")?,
        "probe.folds" => cfg.probe_folds = parse(key, value, "an unsigned integer")?,
        "probe.l2_strength" => cfg.probe.l2_strength = parse(key, value, "a number")?,
        "probe.max_iterations" => {
            cfg.probe.max_iterations = parse(key, value, "an unsigned integer")?
        }
        "probe.convergence_tol" => cfg.probe.convergence_tol = parse(key, value, "a number")?,
        "probe.optimizer_lr" => cfg.probe.optimizer_lr = parse(key, value, "a number")?,
        "cluster.k_min" => cfg.k_min = parse(key, value, "an unsigned integer")?,
        "cluster.k_max" => cfg.k_max = parse(key, value, "an unsigned integer")?,
        "cluster.restarts" => cfg.cluster_restarts = parse(key, value, "an unsigned integer")?,
        "cluster.max_iter" => cfg.cluster_max_iter = parse(key, value, "an unsigned integer")?,
        "cluster.normalize" => cfg.cluster_normalize = parse(key, value, "true or false")?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.synthetic_per_class, 30);
        assert_eq!(cfg.synthetic_size, 48);
        assert_eq!(cfg.encoder.stage_channels, vec![8, 16, 32]);
        assert_eq!(cfg.encoder.blocks_per_stage, vec![1, 1, 1]);
        assert_eq!(cfg.encoder.input_size, 48);
        assert_eq!(cfg.head_hidden_dim, 32);
        assert_eq!(cfg.head_projection_dim, 64);
        assert_eq!(cfg.loss.temperature, 0.5);
        assert_eq!(cfg.train.learning_rate, 3e-4);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.probe_folds, 5);
        assert_eq!((cfg.k_min, cfg.k_max), (3, 15));
        cfg.encoder.validate().unwrap();
        cfg.augment.validate().unwrap();
        cfg.loss.validate().unwrap();
        cfg.train.validate().unwrap();
        cfg.probe.validate().unwrap();
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let mut cfg = RunConfig::default().resolve(Some(7), None);
        cfg.images = Some(PathBuf::from("/data/imgs"));
        cfg.encoder.stage_channels = vec![4, 8];
        cfg.encoder.blocks_per_stage = vec![2, 1];
        cfg.embed_space = EmbedSpace::Projection;
        cfg.cluster_normalize = true;
        let mut reparsed = RunConfig::default();
        apply_config(&mut reparsed, &cfg.echo()).unwrap();
        assert_eq!(reparsed.resolve(None, None), cfg);
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let mut cfg = RunConfig::default();
        let text = "# a comment\n\n  train.epochs=3\nloss.temperature   =   0.25  \n";
        apply_config(&mut cfg, text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.loss.temperature, 0.25);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_line() {
        let mut cfg = RunConfig::default();
        let err = apply_config(&mut cfg, "run.seed = 1\ntrain.momentum = 0.9\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("train.momentum"), "{}", err.message);
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut cfg = RunConfig::default();
        let err = apply_config(&mut cfg, "train.epochs = banana\n").unwrap_err();
        assert!(err.message.contains("train.epochs"), "{}", err.message);
        assert!(err.message.contains("banana"), "{}", err.message);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = apply_config(&mut cfg, "run.seed = 1\nrun.seed = 2\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("duplicate"), "{}", err.message);
    }

    #[test]
    fn line_without_equals_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = apply_config(&mut cfg, "run.seed 1\n").unwrap_err();
        assert_eq!(err.line, Some(1));
    }

    #[test]
    fn empty_path_value_clears_the_path() {
        let mut cfg = RunConfig::default();
        cfg.images = Some(PathBuf::from("x"));
        apply_config(&mut cfg, "data.images =\n").unwrap();
        assert_eq!(cfg.images, None);
    }

    #[test]
    fn flag_overrides_win_and_sync_the_trainer_seed() {
        let mut cfg = RunConfig::default();
        apply_config(&mut cfg, "run.seed = 9\nrun.out_dir = from_file\n").unwrap();
        let cfg = cfg.resolve(Some(5), Some(PathBuf::from("from_flag")));
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.out_dir, PathBuf::from("from_flag"));
    }
}
