//! Synthetic desk-scale dataset with six structurally distinct sky classes.
//!
//! Each class mimics the gross structure of its real counterpart — bands for
//! arcs, soft patches for diffuse glow, compact spots for discrete forms,
//! low-contrast large-scale texture for clouds, a saturating disc with a
//! halo for the moon, and sparse point sources for clear sky — so that
//! contrastive training has genuine shared structure to find between two
//! crops of the same image. Values are raw "sensor" brightness; every image
//! goes through the same percentile normalization as file-loaded data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{scale_image, DataError, Dataset, ImageRecord, LABEL_NAMES, NUM_CLASSES};
use crate::tensor::Tensor;

/// Generates `per_class` images for each of the six classes.
///
/// Determinism: every record draws from its own ChaCha8 stream (stream id =
/// record index, seeded by `seed`), so the dataset is identical across runs
/// and insensitive to generation order.
pub fn generate_synthetic_dataset(
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if per_class == 0 {
        return Err(DataError::InvalidSyntheticSpec {
            message: "need at least one image per class".to_string(),
        });
    }
    if image_size < 16 {
        return Err(DataError::InvalidSyntheticSpec {
            message: format!("image size {image_size} below the minimum of 16"),
        });
    }
    let mut records = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for idx in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((class * per_class + idx) as u64);
            let raw = render_class(class, image_size, &mut rng);
            let raw_t = Tensor::new(vec![image_size, image_size], raw)
                .expect("render produces image_size^2 samples");
            let (normalized, degenerate) = scale_image(&raw_t)?;
            let pixels = Tensor::new(
                vec![1, image_size, image_size],
                normalized.data().to_vec(),
            )
            .expect("normalization preserves the pixel count");
            records.push(ImageRecord {
                pixels,
                label: class,
                source_id: format!("syn-{}-{idx:04}", LABEL_NAMES[class]),
                degenerate,
            });
        }
    }
    Dataset::from_records(records)
}

fn render_class(class: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match class {
        0 => render_arc(s, rng),
        1 => render_diffuse(s, rng),
        2 => render_discrete(s, rng),
        3 => render_cloudy(s, rng),
        4 => render_moon(s, rng),
        _ => render_clear(s, rng),
    }
}

/// Dim sky background with mild per-pixel noise.
fn base_sky(s: usize, rng: &mut ChaCha8Rng, level: f64, noise: f64) -> Vec<f64> {
    (0..s * s)
        .map(|_| level + rng.gen::<f64>() * noise)
        .collect()
}

fn coords(s: usize, pos: usize) -> (f64, f64) {
    let denom = (s - 1) as f64;
    ((pos % s) as f64 / denom, (pos / s) as f64 / denom)
}

/// One or two sharp, slightly slanted bands spanning the frame.
fn render_arc(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = base_sky(s, rng, 10.0, 3.0);
    let bands = if rng.gen::<f64>() < 0.4 { 2 } else { 1 };
    for _ in 0..bands {
        let cy = rng.gen_range(0.2..0.8);
        let slope = rng.gen_range(-0.3..0.3);
        let half_width = rng.gen_range(0.03..0.08);
        let amp = rng.gen_range(150.0..230.0);
        for (pos, v) in img.iter_mut().enumerate() {
            let (x, y) = coords(s, pos);
            let d = (y - (cy + slope * (x - 0.5))).abs() / half_width;
            // Sixth-power falloff: flat crest, crisp edges.
            *v += amp / (1.0 + d.powi(6));
        }
    }
    img
}

/// A few large, soft patches of glow with fuzzy boundaries.
fn render_diffuse(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = base_sky(s, rng, 10.0, 3.0);
    let patches = rng.gen_range(3..=5);
    for _ in 0..patches {
        let cx = rng.gen_range(0.15..0.85);
        let cy = rng.gen_range(0.15..0.85);
        let sigma = rng.gen_range(0.15..0.28);
        let amp = rng.gen_range(60.0..120.0);
        for (pos, v) in img.iter_mut().enumerate() {
            let (x, y) = coords(s, pos);
            let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            *v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    img
}

/// Several compact, hard-edged bright spots.
fn render_discrete(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = base_sky(s, rng, 10.0, 3.0);
    let spots = rng.gen_range(3..=6);
    for _ in 0..spots {
        let cx = rng.gen_range(0.1..0.9);
        let cy = rng.gen_range(0.1..0.9);
        let radius = rng.gen_range(0.03..0.07);
        let amp = rng.gen_range(150.0..230.0);
        for (pos, v) in img.iter_mut().enumerate() {
            let (x, y) = coords(s, pos);
            let r = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt() / radius;
            *v += amp / (1.0 + r.powi(8));
        }
    }
    img
}

/// Bright everywhere with gentle large-scale variation and no sharp edges.
fn render_cloudy(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = base_sky(s, rng, 70.0, 3.0);
    for _ in 0..12 {
        let cx = rng.gen_range(0.0..1.0);
        let cy = rng.gen_range(0.0..1.0);
        let sigma = rng.gen_range(0.2..0.45);
        let amp = rng.gen_range(15.0..40.0);
        for (pos, v) in img.iter_mut().enumerate() {
            let (x, y) = coords(s, pos);
            let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            *v += amp * (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    img
}

/// One saturating disc with a wide halo.
fn render_moon(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = base_sky(s, rng, 10.0, 3.0);
    let cx = rng.gen_range(0.3..0.7);
    let cy = rng.gen_range(0.3..0.7);
    let radius = rng.gen_range(0.06..0.11);
    let halo_sigma = rng.gen_range(0.2..0.35);
    let halo_amp = rng.gen_range(40.0..80.0);
    for (pos, v) in img.iter_mut().enumerate() {
        let (x, y) = coords(s, pos);
        let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        let r = r2.sqrt() / radius;
        *v += 250.0 / (1.0 + r.powi(10)) + halo_amp * (-r2 / (2.0 * halo_sigma * halo_sigma)).exp();
    }
    img
}

/// Dark sky with sparse point sources.
fn render_clear(s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = base_sky(s, rng, 10.0, 3.0);
    let stars = rng.gen_range(10..=24);
    for _ in 0..stars {
        let r = rng.gen_range(0..s);
        let c = rng.gen_range(0..s);
        let amp = rng.gen_range(90.0..220.0);
        img[r * s + c] += amp;
    }
    img
}
