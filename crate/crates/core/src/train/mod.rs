//! Adam optimization of the encoder/head pair against the contrastive
//! objective, plus post-training embedding extraction.
//!
//! One training step is fully explicit: shuffle (seeded per epoch), build a
//! positive batch, bind parameters to a fresh tape, forward, loss,
//! backward, one Adam update per store, then write back the running-
//! statistics updates. A fresh tape per minibatch means gradients never
//! leak between steps and there is no zero-grad bookkeeping to forget.
//!
//! Everything is deterministic given `TrainConfig::seed`: epoch shuffles
//! and per-batch augmentation seeds are derived from it with fixed tags, so
//! two runs of the same configuration produce bit-identical loss histories
//! and parameters.

pub mod embeddings;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_positive_batch, resize_bilinear, AugmentConfig, AugmentError};
use crate::data::Dataset;
use crate::loss::{ntxent_batch, LossConfig, LossError};
use crate::model::{BoundParams, Encoder, ForwardMode, ModelError, ParamStore, ProjectionHead};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::util::{derive_seed, mean};

/// Domain-separation tags for deriving per-epoch and per-batch seeds.
const SHUFFLE_TAG: u64 = 0xE50C;
const BATCH_TAG: u64 = 0xBA7C;

#[derive(Debug)]
pub enum TrainError {
    Config { message: String },
    DatasetTooSmall { records: usize, batch_size: usize },
    /// The objective left the reals; names where.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// A gradient left the reals; names the parameter.
    NonFiniteGradient { name: String },
    Augment(AugmentError),
    Loss(LossError),
    Model(ModelError),
    Tensor(TensorError),
    Io(std::io::Error),
    /// An embedding file is malformed.
    Format { message: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config { message } => write!(f, "invalid train config: {message}"),
            TrainError::DatasetTooSmall {
                records,
                batch_size,
            } => write!(
                f,
                "dataset has {records} records but one batch needs {batch_size}"
            ),
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "loss became non-finite at epoch {epoch}, batch {batch}")
            }
            TrainError::NonFiniteGradient { name } => {
                write!(f, "gradient of '{name}' became non-finite")
            }
            TrainError::Augment(err) => write!(f, "{err}"),
            TrainError::Loss(err) => write!(f, "{err}"),
            TrainError::Model(err) => write!(f, "{err}"),
            TrainError::Tensor(err) => write!(f, "{err}"),
            TrainError::Io(err) => write!(f, "embedding i/o failed: {err}"),
            TrainError::Format { message } => write!(f, "bad embedding file: {message}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<AugmentError> for TrainError {
    fn from(err: AugmentError) -> Self {
        TrainError::Augment(err)
    }
}

impl From<LossError> for TrainError {
    fn from(err: LossError) -> Self {
        TrainError::Loss(err)
    }
}

impl From<ModelError> for TrainError {
    fn from(err: ModelError) -> Self {
        TrainError::Model(err)
    }
}

impl From<TensorError> for TrainError {
    fn from(err: TensorError) -> Self {
        TrainError::Tensor(err)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(err: std::io::Error) -> Self {
        TrainError::Io(err)
    }
}

/// Optimization recipe. Defaults are the desk-scale training run: Adam at a
/// fixed 3e-4 with no weight decay, batches of 8, 40 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            epochs: 40,
            batch_size: 8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let config = |message: String| Err(TrainError::Config { message });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return config(format!("beta1 {} must lie in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return config(format!("beta2 {} must lie in [0, 1)", self.beta2));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return config(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.epochs == 0 {
            return config("epochs must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            return config(format!("batch_size {} must be at least 2", self.batch_size));
        }
        Ok(())
    }
}

/// First and second moment estimates for every trainable parameter of one
/// store, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    moments: Vec<Moments>,
    t: u64,
}

#[derive(Debug, Clone)]
struct Moments {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    /// Zero-initialized state aligned with the store's trainable entries.
    pub fn new(store: &ParamStore) -> AdamState {
        let moments = store
            .entries()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Moments {
                name: p.name.clone(),
                m: vec![0.0; p.data.len()],
                v: vec![0.0; p.data.len()],
            })
            .collect();
        AdamState { moments, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every trainable parameter of `store`, reading
/// gradients from the bound tensors of the step's tape. A parameter the
/// loss never touched has no gradient and is treated as g = 0 (its moments
/// still decay). The caller is trusted on hyperparameters — `train`
/// validates them once up front — which permits deliberate lr = 0 probes.
pub fn adam_step(
    store: &mut ParamStore,
    bound: &BoundParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for moments in &mut state.moments {
        let grad = bound.get(&moments.name)?.grad();
        if let Some(g) = &grad {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                let _ = bad;
                return Err(TrainError::NonFiniteGradient {
                    name: moments.name.clone(),
                });
            }
        }
        let param = store
            .get_mut(&moments.name)
            .ok_or_else(|| ModelError::MissingParam {
                name: moments.name.clone(),
            })
            .map_err(TrainError::Model)?;
        for i in 0..param.data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
            moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = moments.m[i] / bias1;
            let v_hat = moments.v[i] / bias2;
            let theta = param.data[i];
            let mut update = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            if cfg.weight_decay > 0.0 {
                update += cfg.learning_rate * cfg.weight_decay * theta;
            }
            param.data[i] = theta - update;
        }
    }
    Ok(())
}

/// Per-epoch mean losses from a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub loss_history: Vec<f64>,
}

/// Runs the full contrastive training loop, updating `encoder` and `head`
/// in place.
pub fn train(
    dataset: &Dataset,
    encoder: &mut Encoder,
    head: &mut ProjectionHead,
    augment_cfg: &AugmentConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    train_cfg.validate()?;
    augment_cfg.validate()?;
    loss_cfg.validate().map_err(TrainError::Loss)?;
    if dataset.len() < train_cfg.batch_size {
        return Err(TrainError::DatasetTooSmall {
            records: dataset.len(),
            batch_size: train_cfg.batch_size,
        });
    }
    if augment_cfg.output_size != encoder.config().input_size {
        return Err(TrainError::Config {
            message: format!(
                "augmented views are {} px but the encoder expects {}",
                augment_cfg.output_size,
                encoder.config().input_size
            ),
        });
    }
    if head.input_dim() != encoder.representation_dim() {
        return Err(TrainError::Config {
            message: format!(
                "head expects {}-dimensional representations but the encoder produces {}",
                head.input_dim(),
                encoder.representation_dim()
            ),
        });
    }

    let mut encoder_state = AdamState::new(&encoder.params);
    let mut head_state = AdamState::new(&head.params);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let shuffle_seed = derive_seed(&[train_cfg.seed, SHUFFLE_TAG, epoch as u64]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut batch_losses = Vec::new();
        for (bi, chunk) in order.chunks_exact(train_cfg.batch_size).enumerate() {
            let records: Vec<&crate::data::ImageRecord> =
                chunk.iter().map(|&i| &dataset.records[i]).collect();
            let batch_seed = derive_seed(&[train_cfg.seed, BATCH_TAG, epoch as u64, bi as u64]);
            let batch = make_positive_batch(&records, augment_cfg, batch_seed)?;

            let tape = Tape::new();
            let encoder_out = encoder.forward(Some(&tape), &batch.views, ForwardMode::Train)?;
            let (z, head_bound) = head.forward(Some(&tape), &encoder_out.h)?;
            let loss = ntxent_batch(&z, &batch.pair_index, loss_cfg)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss.backward()?;
            adam_step(&mut encoder.params, &encoder_out.bound, &mut encoder_state, train_cfg)?;
            adam_step(&mut head.params, &head_bound, &mut head_state, train_cfg)?;
            encoder.apply_buffer_updates(&encoder_out.buffer_updates)?;
            batch_losses.push(value);
        }
        history.push(mean(&batch_losses));
    }
    Ok(TrainOutput {
        loss_history: history,
    })
}

/// Embeddings for a whole dataset, one row per record in dataset order.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// `[N, representation_dim]`.
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub source_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }
}

/// Embeds every record with the encoder in inference mode: the full
/// preprocessed image is resized to the encoder's input size, no
/// augmentation is applied, and normalization uses running statistics, so
/// rows do not depend on how records are batched together.
pub fn extract_embeddings(
    encoder: &Encoder,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<EmbeddingSet, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config {
            message: "extraction batch_size must be at least 1".to_string(),
        });
    }
    let size = encoder.config().input_size;
    let dim = encoder.representation_dim();
    let mut flat = Vec::with_capacity(dataset.len() * dim);
    for chunk in dataset.records.chunks(batch_size) {
        let mut views = Vec::with_capacity(chunk.len() * size * size);
        for record in chunk {
            let resized = resize_bilinear(&record.pixels, size)?;
            views.extend_from_slice(resized.data());
        }
        let batch = Tensor::new(vec![chunk.len(), 1, size, size], views)?;
        let h = encoder.encode(&batch)?;
        flat.extend_from_slice(h.data());
    }
    Ok(EmbeddingSet {
        embeddings: Tensor::new(vec![dataset.len(), dim], flat)?,
        labels: dataset.labels(),
        source_ids: dataset.records.iter().map(|r| r.source_id.clone()).collect(),
    })
}
