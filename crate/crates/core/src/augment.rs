//! Stochastic augmentations that produce positive pairs for contrastive
//! training: random resized crop plus random flip, and nothing else — the
//! inputs are single-channel brightness maps, so color distortion has no
//! meaning here and grayscale intensity carries class signal we must not
//! destroy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageRecord;
use crate::tensor::Tensor;

use std::fmt;

/// Error type for augmentation configuration and application.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentError {
    /// Crop scale bounds outside `0 < min <= max <= 1`.
    InvalidScaleRange { min: f64, max: f64 },
    /// Output side length too small to carry structure.
    OutputTooSmall { size: usize },
    /// Flip probability outside `[0, 1]`.
    InvalidProbability { p: f64 },
    /// Input tensor is not a `[1, h, w]` image with h, w >= 2.
    NotAnImage { got: Vec<usize> },
    /// A positive batch needs at least two source records.
    BatchTooSmall { len: usize },
    /// A record in the batch has unusable pixels; names the offender.
    BadRecord { source_id: String, message: String },
}

impl fmt::Display for AugmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentError::InvalidScaleRange { min, max } => {
                write!(f, "crop scale range [{min}, {max}] violates 0 < min <= max <= 1")
            }
            AugmentError::OutputTooSmall { size } => {
                write!(f, "augmentation output size {size} below the minimum of 8")
            }
            AugmentError::InvalidProbability { p } => {
                write!(f, "flip probability {p} outside [0, 1]")
            }
            AugmentError::NotAnImage { got } => {
                write!(f, "expected a [1, h, w] image with h, w >= 2, got {got:?}")
            }
            AugmentError::BatchTooSmall { len } => {
                write!(f, "a positive batch needs at least 2 records, got {len}")
            }
            AugmentError::BadRecord { source_id, message } => {
                write!(f, "record '{source_id}': {message}")
            }
        }
    }
}

impl std::error::Error for AugmentError {}

/// Which mirror reflection the random flip applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror top-to-bottom.
    Horizontal,
    /// Mirror left-to-right.
    Vertical,
    /// Never flip.
    None,
}

/// Augmentation policy for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Lower bound of the crop area as a fraction of the source area.
    pub crop_scale_min: f64,
    /// Upper bound of the crop area fraction.
    pub crop_scale_max: f64,
    /// Side length every view is resized to.
    pub output_size: usize,
    pub flip_axis: FlipAxis,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            output_size: 48,
            flip_axis: FlipAxis::Horizontal,
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(AugmentError::InvalidScaleRange {
                min: self.crop_scale_min,
                max: self.crop_scale_max,
            });
        }
        if self.output_size < 8 {
            return Err(AugmentError::OutputTooSmall {
                size: self.output_size,
            });
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(AugmentError::InvalidProbability {
                p: self.flip_probability,
            });
        }
        Ok(())
    }
}

/// A batch of augmented views: two per source record, adjacent in the
/// tensor, with bookkeeping for the contrastive loss and diagnostics.
#[derive(Debug)]
pub struct PositiveBatch {
    /// All views, shape `[2N, 1, s, s]`; rows `2k` and `2k+1` come from
    /// source record `k`.
    pub views: Tensor,
    /// `pair_index[i]` is the row holding the other view of row `i`'s
    /// source image. It is an involution with no fixed points.
    pub pair_index: Vec<usize>,
    /// Label of the source record behind each *source*, length N. Not used
    /// by the loss; kept for diagnostics.
    pub source_labels: Vec<usize>,
}

fn image_dims(img: &Tensor) -> Result<(usize, usize), AugmentError> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 || s[1] < 2 || s[2] < 2 {
        return Err(AugmentError::NotAnImage { got: s.to_vec() });
    }
    Ok((s[1], s[2]))
}

/// Bilinear resize of a `[1, h, w]` image to `[1, size, size]`.
///
/// Sample positions use pixel-center alignment, so resizing to the source
/// size copies the image bit-exactly. Outputs are clamped to `[0, 1]` to
/// absorb rounding at the boundaries.
pub fn resize_bilinear(img: &Tensor, size: usize) -> Result<Tensor, AugmentError> {
    let (h, w) = image_dims(img)?;
    if size == 0 {
        return Err(AugmentError::OutputTooSmall { size });
    }
    let src = img.data();
    let mut out = vec![0.0; size * size];
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[oy * size + ox] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::new(vec![1, size, size], out).expect("resize output dims are consistent"))
}

/// Extracts a square window and returns it as a standalone `[1, side, side]`
/// image.
fn window(img: &Tensor, top: usize, left: usize, side: usize) -> Tensor {
    let (_, w) = (img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut data = Vec::with_capacity(side * side);
    for r in top..top + side {
        data.extend_from_slice(&src[r * w + left..r * w + left + side]);
    }
    Tensor::new(vec![1, side, side], data).expect("window dims are consistent")
}

/// Samples a square crop whose area is a uniform fraction of the source
/// area within the configured scale range, then resizes it to the output
/// size. Ten attempts are made to fit the sampled square; a full-frame
/// fallback keeps the operation total.
pub fn random_resized_crop(
    img: &Tensor,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, AugmentError> {
    config.validate()?;
    let (h, w) = image_dims(img)?;
    let max_side = h.min(w);
    for _ in 0..10 {
        let scale = rng.gen_range(config.crop_scale_min..=config.crop_scale_max);
        let side = ((scale * (h * w) as f64).sqrt().round() as usize).clamp(1, max_side);
        if side < 1 {
            continue;
        }
        let top = if h == side { 0 } else { rng.gen_range(0..=h - side) };
        let left = if w == side { 0 } else { rng.gen_range(0..=w - side) };
        return resize_bilinear(&window(img, top, left, side), config.output_size);
    }
    resize_bilinear(img, config.output_size)
}

/// Mirrors the image along the configured axis with the configured
/// probability. With `FlipAxis::None` the input is returned unchanged and
/// no randomness is consumed.
pub fn random_flip(
    img: &Tensor,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, AugmentError> {
    config.validate()?;
    let (h, w) = image_dims(img)?;
    if config.flip_axis == FlipAxis::None {
        return Ok(img.clone());
    }
    if rng.gen::<f64>() >= config.flip_probability {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = vec![0.0; h * w];
    match config.flip_axis {
        FlipAxis::Horizontal => {
            for r in 0..h {
                out[r * w..(r + 1) * w].copy_from_slice(&src[(h - 1 - r) * w..(h - r) * w]);
            }
        }
        FlipAxis::Vertical => {
            for r in 0..h {
                for c in 0..w {
                    out[r * w + c] = src[r * w + (w - 1 - c)];
                }
            }
        }
        FlipAxis::None => unreachable!(),
    }
    Ok(Tensor::new(vec![1, h, w], out).expect("flip preserves dims"))
}

/// Builds the two-views-per-record batch for one training step.
///
/// Each record gets its own ChaCha8 stream (stream id = position in the
/// batch, seeded by `seed`), so the views of record `k` do not depend on
/// how many records precede it or on batch size.
pub fn make_positive_batch(
    records: &[&ImageRecord],
    config: &AugmentConfig,
    seed: u64,
) -> Result<PositiveBatch, AugmentError> {
    config.validate()?;
    if records.len() < 2 {
        return Err(AugmentError::BatchTooSmall {
            len: records.len(),
        });
    }
    let n = records.len();
    let s = config.output_size;
    let mut data = Vec::with_capacity(2 * n * s * s);
    let mut pair_index = Vec::with_capacity(2 * n);
    let mut source_labels = Vec::with_capacity(n);
    for (k, rec) in records.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for _view in 0..2 {
            let cropped = random_resized_crop(&rec.pixels, config, &mut rng).map_err(|e| {
                match e {
                    AugmentError::NotAnImage { got } => AugmentError::BadRecord {
                        source_id: rec.source_id.clone(),
                        message: format!("pixels have shape {got:?}"),
                    },
                    other => other,
                }
            })?;
            let flipped = random_flip(&cropped, config, &mut rng)?;
            data.extend_from_slice(flipped.data());
        }
        pair_index.push(2 * k + 1);
        pair_index.push(2 * k);
        source_labels.push(rec.label);
    }
    let views =
        Tensor::new(vec![2 * n, 1, s, s], data).expect("view count and dims are consistent");
    Ok(PositiveBatch {
        views,
        pair_index,
        source_labels,
    })
}
