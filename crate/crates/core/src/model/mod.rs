//! The residual encoder f(·) and the bias-free projection head g(·).
//!
//! The encoder is a 3×3 stem convolution followed by stages of residual
//! blocks (conv–norm–relu–conv–norm plus a shortcut, then relu). The first
//! block of every stage after the first downsamples by stride 2 and widens
//! the channel count; a 1×1 projection shortcut reconciles shapes where the
//! main path changes them. Global average pooling turns the final feature
//! map into the representation h. The head computes z = relu(h·W₁)·W₂ with
//! no bias terms anywhere.
//!
//! Parameters live in a [`ParamStore`] keyed by stable dotted names such as
//! `stage0.block0.conv1.weight`. A forward pass never mutates the store: it
//! binds parameters to a tape (or to untracked constants for inference),
//! walks the network, and returns any running-statistics updates for the
//! caller to apply afterwards. Training steps therefore stay explicit —
//! bind, forward, backward, update — with no hidden state changes between.

pub mod checkpoint;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{
    add, batch_norm2d_eval, batch_norm2d_train, conv2d, global_avg_pool, matmul, relu, Tape,
    Tensor, TensorError,
};

/// Epsilon inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

/// Exponential-moving-average weight for running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
pub enum ModelError {
    /// The configuration is internally inconsistent.
    Config { message: String },
    /// A parameter the architecture requires is absent.
    MissingParam { name: String },
    /// A parameter no part of the architecture declares.
    UnexpectedParam { name: String },
    /// A named parameter arrived with the wrong shape.
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// The input tensor does not match what the network accepts.
    InputShape { expected: String, got: Vec<usize> },
    Io(std::io::Error),
    /// A checkpoint file is malformed.
    Format { message: String },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config { message } => write!(f, "invalid model config: {message}"),
            ModelError::MissingParam { name } => write!(f, "missing parameter '{name}'"),
            ModelError::UnexpectedParam { name } => write!(f, "unexpected parameter '{name}'"),
            ModelError::ShapeMismatch {
                name,
                expected,
                got,
            } => write!(
                f,
                "parameter '{name}' has shape {got:?} but the architecture requires {expected:?}"
            ),
            ModelError::InputShape { expected, got } => {
                write!(f, "input shape {got:?} does not match {expected}")
            }
            ModelError::Io(err) => write!(f, "checkpoint i/o failed: {err}"),
            ModelError::Format { message } => write!(f, "bad checkpoint: {message}"),
            ModelError::Tensor(err) => write!(f, "{err}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(err: TensorError) -> Self {
        ModelError::Tensor(err)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(err: std::io::Error) -> Self {
        ModelError::Io(err)
    }
}

/// Normalization applied inside the stem and every residual block.
///
/// Batch statistics are noisy at batch sizes of 4–8, so the desk-scale
/// pipeline can switch normalization off entirely instead of pretending the
/// estimates are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Batch,
    None,
}

/// Shape of the residual encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channel width of each stage; the last entry is the representation
    /// dimension.
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage; same length as `stage_channels`.
    pub blocks_per_stage: Vec<usize>,
    /// Side length of the square single-channel input.
    pub input_size: usize,
    pub norm: NormMode,
}

impl EncoderConfig {
    /// The tiny configuration the synthetic desk-scale pipeline trains.
    pub fn desk() -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            input_size: 48,
            norm: NormMode::Batch,
        }
    }

    /// The ResNet18-shaped configuration: four stages of two blocks each.
    pub fn resnet18(input_size: usize) -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            input_size,
            norm: NormMode::Batch,
        }
    }

    /// Dimension of the representation h produced by the final pooling.
    pub fn representation_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let config = |message: String| Err(ModelError::Config { message });
        if self.stage_channels.is_empty() {
            return config("at least one stage is required".to_string());
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return config(format!(
                "stage_channels has {} entries but blocks_per_stage has {}",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        if let Some(i) = self.stage_channels.iter().position(|&c| c == 0) {
            return config(format!("stage {i} has zero channels"));
        }
        if let Some(i) = self.blocks_per_stage.iter().position(|&b| b == 0) {
            return config(format!("stage {i} has zero blocks"));
        }
        if self.input_size == 0 {
            return config("input_size must be positive".to_string());
        }
        // The stem keeps the spatial size; every stage after the first
        // halves it (rounding up). A stage cannot halve a 1×1 map.
        let mut size = self.input_size;
        for i in 1..self.stage_channels.len() {
            if size < 2 {
                return config(format!(
                    "input_size {} is too small: stage {} would receive a {}×{} map \
                     and cannot downsample",
                    self.input_size, i, size, size
                ));
            }
            size = (size + 1) / 2;
        }
        Ok(())
    }
}

/// One named parameter: a master copy of its values plus whether the
/// optimizer may touch it. Running statistics are stored here too, as
/// non-trainable buffers, so a checkpoint captures them.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named parameters. Order is the construction order
/// and is stable across builds, which keeps initialization and
/// serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>, trainable: bool) {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter '{name}' data does not match its shape"
        );
        assert!(
            self.get(&name).is_none(),
            "parameter '{name}' registered twice"
        );
        self.entries.push(Param {
            name,
            shape,
            data,
            trainable,
        });
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn trainable_value_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(Param::numel)
            .sum()
    }

    /// Materializes every parameter as a tensor. With a tape, trainable
    /// parameters become tracked leaves (gradients flow to them); buffers
    /// are always untracked constants. Without a tape the whole binding is
    /// constant, which is the inference path.
    pub fn bind(&self, tape: Option<&Tape>) -> Result<BoundParams, ModelError> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let tensor = match tape {
                Some(tape) if p.trainable => tape.var(p.shape.clone(), p.data.clone())?,
                _ => Tensor::raw(p.shape.clone(), p.data.clone(), false, None),
            };
            entries.push((p.name.clone(), tensor));
        }
        Ok(BoundParams { entries })
    }

    /// Replaces every master value with the matching entry of `incoming`.
    /// The two sets must agree exactly on names, shapes, and trainability —
    /// a checkpoint from a different architecture is rejected, not coerced.
    pub fn load_entries(&mut self, incoming: &[Param]) -> Result<(), ModelError> {
        for p in incoming {
            match self.get(&p.name) {
                None => {
                    return Err(ModelError::UnexpectedParam {
                        name: p.name.clone(),
                    })
                }
                Some(existing) if existing.shape != p.shape => {
                    return Err(ModelError::ShapeMismatch {
                        name: p.name.clone(),
                        expected: existing.shape.clone(),
                        got: p.shape.clone(),
                    })
                }
                Some(existing) if existing.trainable != p.trainable => {
                    return Err(ModelError::Format {
                        message: format!(
                            "parameter '{}' disagrees on trainability with the architecture",
                            p.name
                        ),
                    })
                }
                Some(_) => {}
            }
        }
        for existing in &self.entries {
            if !incoming.iter().any(|p| p.name == existing.name) {
                return Err(ModelError::MissingParam {
                    name: existing.name.clone(),
                });
            }
        }
        for p in incoming {
            let slot = self.get_mut(&p.name).expect("presence checked above");
            slot.data.copy_from_slice(&p.data);
        }
        Ok(())
    }
}

/// Tensors for one forward pass, keyed by parameter name.
pub struct BoundParams {
    entries: Vec<(String, Tensor)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })
    }

    /// Swaps one binding for a caller-supplied tensor of the same shape —
    /// the hook gradient checks use to probe a single parameter.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<(), ModelError> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })?;
        if slot.1.shape() != tensor.shape() {
            return Err(ModelError::ShapeMismatch {
                name: name.to_string(),
                expected: slot.1.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        slot.1 = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Whether a forward pass normalizes with batch statistics (and reports
/// running-average updates) or with the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Everything a training step needs back from the encoder: the
/// representation, the tracked parameter bindings (for gradient retrieval),
/// and the running-statistics updates to apply after the step.
pub struct EncoderOutput {
    pub h: Tensor,
    pub bound: BoundParams,
    pub buffer_updates: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    pub params: ParamStore,
}

/// Builds a freshly initialized encoder. Convolution weights draw from a
/// Kaiming fan-in normal distribution; norm scales start at 1, shifts and
/// running means at 0, running variances at 1. The same seed always
/// produces bit-identical parameters.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let c0 = config.stage_channels[0];
    params.push(
        "stem.conv.weight".to_string(),
        vec![c0, 1, 3, 3],
        kaiming_conv(&mut rng, c0, 1, 3),
        true,
    );
    if config.norm == NormMode::Batch {
        push_norm_params(&mut params, "stem.bn", c0);
    }
    let mut cin = c0;
    for (i, (&cout, &blocks)) in config
        .stage_channels
        .iter()
        .zip(&config.blocks_per_stage)
        .enumerate()
    {
        for j in 0..blocks {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let prefix = format!("stage{i}.block{j}");
            params.push(
                format!("{prefix}.conv1.weight"),
                vec![cout, cin, 3, 3],
                kaiming_conv(&mut rng, cout, cin, 3),
                true,
            );
            if config.norm == NormMode::Batch {
                push_norm_params(&mut params, &format!("{prefix}.bn1"), cout);
            }
            params.push(
                format!("{prefix}.conv2.weight"),
                vec![cout, cout, 3, 3],
                kaiming_conv(&mut rng, cout, cout, 3),
                true,
            );
            if config.norm == NormMode::Batch {
                push_norm_params(&mut params, &format!("{prefix}.bn2"), cout);
            }
            if stride != 1 || cin != cout {
                params.push(
                    format!("{prefix}.shortcut.conv.weight"),
                    vec![cout, cin, 1, 1],
                    kaiming_conv(&mut rng, cout, cin, 1),
                    true,
                );
                if config.norm == NormMode::Batch {
                    push_norm_params(&mut params, &format!("{prefix}.shortcut.bn"), cout);
                }
            }
            cin = cout;
        }
    }
    Ok(Encoder {
        config: config.clone(),
        params,
    })
}

fn push_norm_params(params: &mut ParamStore, prefix: &str, channels: usize) {
    params.push(
        format!("{prefix}.gamma"),
        vec![channels],
        vec![1.0; channels],
        true,
    );
    params.push(
        format!("{prefix}.beta"),
        vec![channels],
        vec![0.0; channels],
        true,
    );
    params.push(
        format!("{prefix}.running_mean"),
        vec![channels],
        vec![0.0; channels],
        false,
    );
    params.push(
        format!("{prefix}.running_var"),
        vec![channels],
        vec![1.0; channels],
        false,
    );
}

fn kaiming_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let fan_in = (cin * k * k) as f64;
    normal_values(rng, cout * cin * k * k, (2.0 / fan_in).sqrt())
}

/// Standard normal draws via Box–Muller, scaled by `std`.
fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // 1 - u maps the generator's [0, 1) onto (0, 1], keeping ln finite.
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        out.push(std * radius * angle.cos());
        if out.len() < n {
            out.push(std * radius * angle.sin());
        }
    }
    out
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn representation_dim(&self) -> usize {
        self.config.representation_dim()
    }

    /// Number of trainable scalar parameters (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_value_count()
    }

    /// Binds parameters and runs the network. `views` must be
    /// `[B, 1, input_size, input_size]`.
    pub fn forward(
        &self,
        tape: Option<&Tape>,
        views: &Tensor,
        mode: ForwardMode,
    ) -> Result<EncoderOutput, ModelError> {
        let bound = self.params.bind(tape)?;
        let (h, buffer_updates) = self.forward_bound(&bound, views, mode)?;
        Ok(EncoderOutput {
            h,
            bound,
            buffer_updates,
        })
    }

    /// The forward walk against an existing binding. Returned updates are
    /// `(buffer name, new values)` pairs; eval mode never produces any.
    pub fn forward_bound(
        &self,
        bound: &BoundParams,
        views: &Tensor,
        mode: ForwardMode,
    ) -> Result<(Tensor, Vec<(String, Vec<f64>)>), ModelError> {
        let s = self.config.input_size;
        let ok = views.rank() == 4
            && views.shape()[1] == 1
            && views.shape()[2] == s
            && views.shape()[3] == s;
        if !ok {
            return Err(ModelError::InputShape {
                expected: format!("[B, 1, {s}, {s}]"),
                got: views.shape().to_vec(),
            });
        }
        let mut updates = Vec::new();
        let mut x = conv2d(views, bound.get("stem.conv.weight")?, 1, 1)?;
        x = self.norm_forward(bound, "stem.bn", &x, mode, &mut updates)?;
        x = relu(&x)?;
        let mut cin = self.config.stage_channels[0];
        for (i, (&cout, &blocks)) in self
            .config
            .stage_channels
            .iter()
            .zip(&self.config.blocks_per_stage)
            .enumerate()
        {
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                let prefix = format!("stage{i}.block{j}");
                x = self.block_forward(bound, &prefix, &x, cin, cout, stride, mode, &mut updates)?;
                cin = cout;
            }
        }
        let h = global_avg_pool(&x)?;
        Ok((h, updates))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        bound: &BoundParams,
        prefix: &str,
        x: &Tensor,
        cin: usize,
        cout: usize,
        stride: usize,
        mode: ForwardMode,
        updates: &mut Vec<(String, Vec<f64>)>,
    ) -> Result<Tensor, ModelError> {
        let mut y = conv2d(x, bound.get(&format!("{prefix}.conv1.weight"))?, stride, 1)?;
        y = self.norm_forward(bound, &format!("{prefix}.bn1"), &y, mode, updates)?;
        y = relu(&y)?;
        y = conv2d(&y, bound.get(&format!("{prefix}.conv2.weight"))?, 1, 1)?;
        y = self.norm_forward(bound, &format!("{prefix}.bn2"), &y, mode, updates)?;
        let shortcut = if stride != 1 || cin != cout {
            let projected = conv2d(
                x,
                bound.get(&format!("{prefix}.shortcut.conv.weight"))?,
                stride,
                0,
            )?;
            self.norm_forward(
                bound,
                &format!("{prefix}.shortcut.bn"),
                &projected,
                mode,
                updates,
            )?
        } else {
            x.clone()
        };
        Ok(relu(&add(&y, &shortcut)?)?)
    }

    fn norm_forward(
        &self,
        bound: &BoundParams,
        prefix: &str,
        x: &Tensor,
        mode: ForwardMode,
        updates: &mut Vec<(String, Vec<f64>)>,
    ) -> Result<Tensor, ModelError> {
        if self.config.norm == NormMode::None {
            return Ok(x.clone());
        }
        let gamma = bound.get(&format!("{prefix}.gamma"))?;
        let beta = bound.get(&format!("{prefix}.beta"))?;
        let running_mean = bound.get(&format!("{prefix}.running_mean"))?;
        let running_var = bound.get(&format!("{prefix}.running_var"))?;
        match mode {
            ForwardMode::Eval => {
                Ok(batch_norm2d_eval(x, gamma, beta, running_mean, running_var, BN_EPS)?)
            }
            ForwardMode::Train => {
                let (y, mean, var) = batch_norm2d_train(x, gamma, beta, BN_EPS)?;
                let channels = mean.numel();
                let n = (x.numel() / channels) as f64;
                // Running variance tracks the unbiased estimate; a
                // single-value plane has no unbiased estimate, so fall back
                // to the biased one rather than divide by zero.
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let new_mean: Vec<f64> = running_mean
                    .data()
                    .iter()
                    .zip(mean.data())
                    .map(|(&r, &m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                    .collect();
                let new_var: Vec<f64> = running_var
                    .data()
                    .iter()
                    .zip(var.data())
                    .map(|(&r, &v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * correction)
                    .collect();
                updates.push((format!("{prefix}.running_mean"), new_mean));
                updates.push((format!("{prefix}.running_var"), new_var));
                Ok(y)
            }
        }
    }

    /// Writes running-statistics updates produced by a training forward
    /// back into the store.
    pub fn apply_buffer_updates(
        &mut self,
        updates: &[(String, Vec<f64>)],
    ) -> Result<(), ModelError> {
        for (name, values) in updates {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| ModelError::MissingParam { name: name.clone() })?;
            if param.trainable {
                return Err(ModelError::Config {
                    message: format!("'{name}' is a trainable parameter, not a buffer"),
                });
            }
            if param.data.len() != values.len() {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: param.shape.clone(),
                    got: vec![values.len()],
                });
            }
            param.data.copy_from_slice(values);
        }
        Ok(())
    }

    /// Inference-mode representation: running statistics, no tape, no
    /// buffer updates. Each row depends only on its own image.
    pub fn encode(&self, views: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(None, views, ForwardMode::Eval)?.h)
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub params: ParamStore,
}

impl ProjectionHead {
    /// Initializes W₁ `[input_dim × hidden_dim]` and W₂
    /// `[hidden_dim × projection_dim]` with Kaiming fan-in draws.
    pub fn build_head(
        input_dim: usize,
        hidden_dim: usize,
        projection_dim: usize,
        seed: u64,
    ) -> Result<ProjectionHead, ModelError> {
        if input_dim == 0 || hidden_dim == 0 || projection_dim == 0 {
            return Err(ModelError::Config {
                message: format!(
                    "head dimensions must be positive, got {input_dim}/{hidden_dim}/{projection_dim}"
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.push(
            "head.w1".to_string(),
            vec![input_dim, hidden_dim],
            normal_values(&mut rng, input_dim * hidden_dim, (2.0 / input_dim as f64).sqrt()),
            true,
        );
        params.push(
            "head.w2".to_string(),
            vec![hidden_dim, projection_dim],
            normal_values(
                &mut rng,
                hidden_dim * projection_dim,
                (2.0 / hidden_dim as f64).sqrt(),
            ),
            true,
        );
        Ok(ProjectionHead { params })
    }

    /// Builds a head from explicit weight matrices.
    pub fn with_weights(w1: &Tensor, w2: &Tensor) -> Result<ProjectionHead, ModelError> {
        if w1.rank() != 2 {
            return Err(ModelError::ShapeMismatch {
                name: "head.w1".to_string(),
                expected: vec![0, 0],
                got: w1.shape().to_vec(),
            });
        }
        if w2.rank() != 2 || w2.shape()[0] != w1.shape()[1] {
            return Err(ModelError::ShapeMismatch {
                name: "head.w2".to_string(),
                expected: vec![w1.shape()[1], 0],
                got: w2.shape().to_vec(),
            });
        }
        let mut params = ParamStore::new();
        params.push(
            "head.w1".to_string(),
            w1.shape().to_vec(),
            w1.data().to_vec(),
            true,
        );
        params.push(
            "head.w2".to_string(),
            w2.shape().to_vec(),
            w2.data().to_vec(),
            true,
        );
        Ok(ProjectionHead { params })
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("head.w1").map(|p| p.shape[0]).unwrap_or(0)
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.get("head.w1").map(|p| p.shape[1]).unwrap_or(0)
    }

    pub fn projection_dim(&self) -> usize {
        self.params.get("head.w2").map(|p| p.shape[1]).unwrap_or(0)
    }

    /// z = relu(h·W₁)·W₂ against an existing binding.
    pub fn forward_bound(bound: &BoundParams, h: &Tensor) -> Result<Tensor, ModelError> {
        let w1 = bound.get("head.w1")?;
        if h.rank() != 2 || h.shape()[1] != w1.shape()[0] {
            return Err(ModelError::InputShape {
                expected: format!("[B, {}]", w1.shape()[0]),
                got: h.shape().to_vec(),
            });
        }
        let hidden = relu(&matmul(h, w1)?)?;
        Ok(matmul(&hidden, bound.get("head.w2")?)?)
    }

    pub fn forward(
        &self,
        tape: Option<&Tape>,
        h: &Tensor,
    ) -> Result<(Tensor, BoundParams), ModelError> {
        let bound = self.params.bind(tape)?;
        let z = ProjectionHead::forward_bound(&bound, h)?;
        Ok((z, bound))
    }

    /// Inference-mode projection without a tape.
    pub fn project(&self, h: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(None, h)?.0)
    }
}
