//! Dataset types, image normalization, and stratified fold splitting.
//!
//! Images are single-channel brightness maps. Raw values in any positive
//! range are mapped into `[0, 1]` by [`scale_image`]: subtract the 1st
//! percentile, divide by the 99th percentile of the shifted values, and
//! clip. The mapping is invariant to affine rescaling of the raw input, so
//! 8-bit files and wider sensor ranges land in the same place.

mod io;
mod synthetic;

pub use io::{load_oath_dataset, read_cache, write_cache, LoadOutcome, SkippedRecord};
pub use synthetic::generate_synthetic_dataset;

use std::fmt;

use crate::tensor::Tensor;

/// Number of label classes.
pub const NUM_CLASSES: usize = 6;

/// Class names in label order: 0 through 5.
pub const LABEL_NAMES: [&str; NUM_CLASSES] =
    ["arc", "diffuse", "discrete", "cloudy", "moon", "clear"];

/// Error type for dataset construction, normalization, and splitting.
#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    /// The image has no pixels.
    EmptyImage,
    /// A pixel value is NaN or infinite.
    NonFinitePixel { index: usize },
    /// The tensor passed in does not have the expected rank.
    NotAnImage { got: Vec<usize> },
    /// Crop fraction outside `[0, 0.5)`.
    InvalidCropFraction { fraction: f64 },
    /// Cropping would leave no pixels.
    CropTooAggressive { height: usize, width: usize, fraction: f64 },
    /// A label outside `0..NUM_CLASSES`.
    InvalidLabel { label: u8, source_id: String },
    /// Two records share a source id.
    DuplicateSourceId { source_id: String },
    /// Fold count below 2.
    InvalidFoldCount { k: usize },
    /// A class has too few members to appear in every fold.
    StratificationError { class: usize, count: usize, k: usize },
    /// The label file is malformed.
    LabelParse { line: usize, message: String },
    /// A listed image file is missing on disk.
    MissingImage { path: String },
    /// Synthetic generation parameters out of range.
    InvalidSyntheticSpec { message: String },
    /// Cache file problems: bad magic, version, or truncation.
    CacheFormat { message: String },
    /// Underlying I/O failure.
    Io { message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::EmptyImage => write!(f, "image has no pixels"),
            DataError::NonFinitePixel { index } => {
                write!(f, "pixel {index} is not a finite number")
            }
            DataError::NotAnImage { got } => {
                write!(f, "expected a [height, width] tensor, got shape {got:?}")
            }
            DataError::InvalidCropFraction { fraction } => {
                write!(f, "crop fraction {fraction} outside [0, 0.5)")
            }
            DataError::CropTooAggressive { height, width, fraction } => {
                write!(f, "cropping {fraction} of a {height}x{width} image leaves nothing")
            }
            DataError::InvalidLabel { label, source_id } => {
                write!(f, "label {label} for '{source_id}' outside 0..{NUM_CLASSES}")
            }
            DataError::DuplicateSourceId { source_id } => {
                write!(f, "duplicate source id '{source_id}'")
            }
            DataError::InvalidFoldCount { k } => {
                write!(f, "fold count {k} is below the minimum of 2")
            }
            DataError::StratificationError { class, count, k } => {
                write!(
                    f,
                    "class {class} ({}) has {count} members, fewer than {k} folds",
                    LABEL_NAMES.get(*class).copied().unwrap_or("?")
                )
            }
            DataError::LabelParse { line, message } => {
                write!(f, "label file line {line}: {message}")
            }
            DataError::MissingImage { path } => write!(f, "image file not found: {path}"),
            DataError::InvalidSyntheticSpec { message } => {
                write!(f, "invalid synthetic dataset request: {message}")
            }
            DataError::CacheFormat { message } => write!(f, "dataset cache: {message}"),
            DataError::Io { message } => write!(f, "i/o error: {message}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io {
            message: e.to_string(),
        }
    }
}

/// One normalized image with its label and provenance.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Normalized pixels, shape `[1, height, width]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// Class label, `0..NUM_CLASSES`.
    pub label: usize,
    /// Stable identifier (filename or synthetic tag).
    pub source_id: String,
    /// True when normalization found no usable dynamic range and produced
    /// an all-zero image.
    pub degenerate: bool,
}

/// An ordered collection of records with per-class counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub class_counts: [usize; NUM_CLASSES],
}

impl Dataset {
    /// Builds a dataset, validating labels and source-id uniqueness.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Dataset, DataError> {
        let mut class_counts = [0usize; NUM_CLASSES];
        let mut seen = std::collections::HashSet::new();
        for rec in &records {
            if rec.label >= NUM_CLASSES {
                return Err(DataError::InvalidLabel {
                    label: rec.label.min(u8::MAX as usize) as u8,
                    source_id: rec.source_id.clone(),
                });
            }
            if !seen.insert(rec.source_id.clone()) {
                return Err(DataError::DuplicateSourceId {
                    source_id: rec.source_id.clone(),
                });
            }
            class_counts[rec.label] += 1;
        }
        Ok(Dataset {
            records,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Stratified fold assignment over this dataset's labels.
    pub fn stratified_folds(&self, k: usize, seed: u64) -> Result<FoldSplit, DataError> {
        stratified_folds(&self.labels(), k, seed)
    }
}

/// Assignment of every record to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    /// `assignments[i]` is the fold of record `i`, in `0..k`.
    pub assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 · n)` in
/// the sorted copy of `values`. `p` must be in `(0, 100]`.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64, DataError> {
    if values.is_empty() {
        return Err(DataError::EmptyImage);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    // p and n are exact in f64, so p·n/100 rounds at most once and ceil
    // lands on the intended rank even when the quotient is a whole number.
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    let rank = rank.clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Floor below which the percentile spread is considered zero and the image
/// degenerate.
const DEGENERATE_SPREAD: f64 = 1e-12;

/// Percentile contrast normalization.
///
/// Subtracts the 1st percentile of the raw values, divides by the 99th
/// percentile of the shifted values, and clips to `[0, 1]`. Returns the
/// normalized image and a degeneracy flag; a flat image (spread below
/// 1e-12) comes back as all zeros with the flag set rather than as an
/// error, so sensor glitches don't abort a whole corpus load.
pub fn scale_image(raw: &Tensor) -> Result<(Tensor, bool), DataError> {
    if raw.rank() != 2 {
        return Err(DataError::NotAnImage {
            got: raw.shape().to_vec(),
        });
    }
    let vals = raw.data();
    if vals.is_empty() {
        return Err(DataError::EmptyImage);
    }
    if let Some(idx) = vals.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinitePixel { index: idx });
    }
    let low = percentile_nearest_rank(vals, 1.0)?;
    let shifted: Vec<f64> = vals.iter().map(|v| v - low).collect();
    let spread = percentile_nearest_rank(&shifted, 99.0)?;
    let shape = raw.shape().to_vec();
    if spread < DEGENERATE_SPREAD {
        return Ok((Tensor::zeros(shape), true));
    }
    let data: Vec<f64> = shifted.iter().map(|v| (v / spread).clamp(0.0, 1.0)).collect();
    Ok((
        Tensor::new(shape, data).expect("shape preserved by normalization"),
        false,
    ))
}

/// Removes `fraction` of the height and width, split evenly between the two
/// sides (centered crop). Used to discard watermark margins before
/// normalization.
pub fn crop_border(image: &Tensor, fraction: f64) -> Result<Tensor, DataError> {
    if image.rank() != 2 {
        return Err(DataError::NotAnImage {
            got: image.shape().to_vec(),
        });
    }
    if !(0.0..0.5).contains(&fraction) {
        return Err(DataError::InvalidCropFraction { fraction });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h == 0 || w == 0 {
        return Err(DataError::EmptyImage);
    }
    // The epsilon guards against representation error in h·(1-f): keeping
    // 85% of 100 pixels must give exactly 85.
    let keep_h = ((h as f64) * (1.0 - fraction) + 1e-9).floor() as usize;
    let keep_w = ((w as f64) * (1.0 - fraction) + 1e-9).floor() as usize;
    if keep_h == 0 || keep_w == 0 {
        return Err(DataError::CropTooAggressive {
            height: h,
            width: w,
            fraction,
        });
    }
    let top = (h - keep_h) / 2;
    let left = (w - keep_w) / 2;
    let src = image.data();
    let mut data = Vec::with_capacity(keep_h * keep_w);
    for r in top..top + keep_h {
        data.extend_from_slice(&src[r * w + left..r * w + left + keep_w]);
    }
    Ok(Tensor::new(vec![keep_h, keep_w], data).expect("crop dimensions match copied data"))
}

/// Stratified k-fold assignment: each class's members are shuffled and dealt
/// across folds so every fold gets a nearly equal share of every class.
///
/// Remainder members (when a class count is not divisible by `k`) are dealt
/// starting from a rotating fold offset so no fold systematically collects
/// the extras. Fold sizes end up within one record per class of each other.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit, DataError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if k < 2 {
        return Err(DataError::InvalidFoldCount { k });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &label) in labels.iter().enumerate() {
        if label >= NUM_CLASSES {
            return Err(DataError::InvalidLabel {
                label: label.min(u8::MAX as usize) as u8,
                source_id: format!("record {i}"),
            });
        }
        by_class[label].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(DataError::StratificationError {
                class,
                count: members.len(),
                k,
            });
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; labels.len()];
    let mut offset = 0usize;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let base = members.len() / k;
        let remainder = members.len() % k;
        let mut cursor = 0usize;
        for fold in 0..k {
            let extra = usize::from((fold + k - offset) % k < remainder);
            for _ in 0..base + extra {
                assignments[members[cursor]] = fold;
                cursor += 1;
            }
        }
        offset = (offset + remainder) % k;
    }
    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(shape: [usize; 2], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn percentile_uses_nearest_rank() {
        let vals: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&vals, 1.0).unwrap(), 1.0);
        assert_eq!(percentile_nearest_rank(&vals, 99.0).unwrap(), 99.0);
        assert_eq!(percentile_nearest_rank(&vals, 50.0).unwrap(), 50.0);
        // Five values: the 99th percentile is the last one (rank ceil(4.95)=5).
        let five = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(percentile_nearest_rank(&five, 99.0).unwrap(), 50.0);
        assert_eq!(percentile_nearest_rank(&five, 1.0).unwrap(), 10.0);
    }

    #[test]
    fn percentile_rank_is_exact_for_awkward_sizes() {
        // 200 values: 1% rank must be ceil(2) = 2, not 3, despite 0.01 not
        // being exactly representable.
        let vals: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&vals, 1.0).unwrap(), 2.0);
        assert_eq!(percentile_nearest_rank(&vals, 99.0).unwrap(), 198.0);
    }

    #[test]
    fn scale_image_maps_into_unit_interval_with_clipping() {
        let vals: Vec<f64> = (1..=100).map(f64::from).collect();
        let (scaled, degenerate) = scale_image(&image([10, 10], vals)).unwrap();
        assert!(!degenerate);
        let data = scaled.data();
        assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        // 1st percentile (=1) maps to 0; everything at or above the shifted
        // 99th percentile (=98) clips to 1.
        assert_eq!(data[0], 0.0);
        assert_eq!(data[99], 1.0);
        assert_eq!(data[98], 1.0);
        // A non-degenerate image always touches 1.0 after clipping.
        assert_eq!(data.iter().cloned().fold(f64::MIN, f64::max), 1.0);
    }

    #[test]
    fn scale_image_is_invariant_to_affine_rescaling() {
        let raw: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
        let shifted: Vec<f64> = raw.iter().map(|v| v * 3.5 + 120.0).collect();
        let (a, _) = scale_image(&image([8, 8], raw)).unwrap();
        let (b, _) = scale_image(&image([8, 8], shifted)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_image_flags_flat_input_as_degenerate() {
        let (scaled, degenerate) = scale_image(&image([4, 4], vec![7.0; 16])).unwrap();
        assert!(degenerate);
        assert!(scaled.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scale_image_rejects_bad_input() {
        assert_eq!(
            scale_image(&Tensor::new(vec![0, 4], vec![]).unwrap()).unwrap_err(),
            DataError::EmptyImage
        );
        assert_eq!(
            scale_image(&image([1, 2], vec![1.0, f64::NAN])).unwrap_err(),
            DataError::NonFinitePixel { index: 1 }
        );
        assert!(matches!(
            scale_image(&Tensor::zeros(vec![2, 2, 2])).unwrap_err(),
            DataError::NotAnImage { .. }
        ));
    }

    #[test]
    fn crop_border_keeps_centered_window() {
        // 100x100 with 15% cropped keeps 85x85.
        let vals: Vec<f64> = (0..10000).map(f64::from).collect();
        let cropped = crop_border(&image([100, 100], vals), 0.15).unwrap();
        assert_eq!(cropped.shape(), &[85, 85]);
        // Top-left of the crop is row 7, col 7 of the original.
        assert_eq!(cropped.data()[0], (7 * 100 + 7) as f64);
    }

    #[test]
    fn crop_border_zero_fraction_is_identity() {
        let vals: Vec<f64> = (0..36).map(f64::from).collect();
        let img = image([6, 6], vals);
        let cropped = crop_border(&img, 0.0).unwrap();
        assert_eq!(cropped.shape(), img.shape());
        assert_eq!(cropped.data(), img.data());
    }

    #[test]
    fn crop_border_validates_fraction() {
        let img = image([4, 4], vec![0.0; 16]);
        assert!(matches!(
            crop_border(&img, 0.5),
            Err(DataError::InvalidCropFraction { .. })
        ));
        assert!(matches!(
            crop_border(&img, -0.1),
            Err(DataError::InvalidCropFraction { .. })
        ));
    }

    #[test]
    fn dataset_rejects_duplicate_ids_and_bad_labels() {
        let mk = |id: &str, label: usize| ImageRecord {
            pixels: Tensor::zeros(vec![1, 2, 2]),
            label,
            source_id: id.to_string(),
            degenerate: false,
        };
        let err = Dataset::from_records(vec![mk("a", 0), mk("a", 1)]).unwrap_err();
        assert!(matches!(err, DataError::DuplicateSourceId { .. }));
        let err = Dataset::from_records(vec![mk("a", 6)]).unwrap_err();
        assert!(matches!(err, DataError::InvalidLabel { .. }));
    }

    #[test]
    fn dataset_counts_classes() {
        let mk = |id: &str, label: usize| ImageRecord {
            pixels: Tensor::zeros(vec![1, 2, 2]),
            label,
            source_id: id.to_string(),
            degenerate: false,
        };
        let ds =
            Dataset::from_records(vec![mk("a", 0), mk("b", 0), mk("c", 3)]).unwrap();
        assert_eq!(ds.class_counts, [2, 0, 0, 1, 0, 0]);
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn folds_are_balanced_within_and_across_classes() {
        // 30 per class, 5 folds: every fold must hold exactly 6 of each.
        let mut labels = Vec::new();
        for c in 0..NUM_CLASSES {
            labels.extend(std::iter::repeat(c).take(30));
        }
        let split = stratified_folds(&labels, 5, 7).unwrap();
        for fold in 0..5 {
            let mut counts = [0usize; NUM_CLASSES];
            for (i, &f) in split.assignments.iter().enumerate() {
                if f == fold {
                    counts[labels[i]] += 1;
                }
            }
            assert_eq!(counts, [6; NUM_CLASSES], "fold {fold}");
        }
    }

    #[test]
    fn fold_remainders_rotate_instead_of_piling_up() {
        // 7 per class and k=3 leaves remainder 1 per class; the extra must
        // not always land in fold 0.
        let mut labels = Vec::new();
        for c in 0..NUM_CLASSES {
            labels.extend(std::iter::repeat(c).take(7));
        }
        let split = stratified_folds(&labels, 3, 0).unwrap();
        let sizes = split.fold_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 42);
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        assert!(spread <= 1, "fold sizes {sizes:?} should differ by at most 1");
    }

    #[test]
    fn folds_error_on_thin_classes() {
        // One record per class cannot stratify into 2 folds.
        let labels: Vec<usize> = (0..NUM_CLASSES).collect();
        let err = stratified_folds(&labels, 2, 0).unwrap_err();
        assert!(matches!(
            err,
            DataError::StratificationError { count: 1, k: 2, .. }
        ));
    }

    #[test]
    fn folds_validate_k() {
        let labels = vec![0usize; 10];
        assert_eq!(
            stratified_folds(&labels, 1, 0).unwrap_err(),
            DataError::InvalidFoldCount { k: 1 }
        );
    }

    #[test]
    fn folds_are_deterministic_per_seed() {
        let mut labels = Vec::new();
        for c in 0..NUM_CLASSES {
            labels.extend(std::iter::repeat(c).take(10));
        }
        let a = stratified_folds(&labels, 5, 11).unwrap();
        let b = stratified_folds(&labels, 5, 11).unwrap();
        let c = stratified_folds(&labels, 5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
