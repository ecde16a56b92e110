//! Small shared helpers: seed derivation and summary statistics.

/// Derives a child seed from a sequence of components (base seed, purpose
/// tag, epoch, batch index, ...) so that every random stream in the pipeline
/// has an independent, reproducible origin.
///
/// Uses splitmix64 finalisation rounds; consecutive inputs map to
/// well-separated outputs.
/// Domain tags for the two parameter-initialisation streams, shared by the
/// pipeline drivers so a run is reproducible from its base seed alone.
pub const ENCODER_SEED_TAG: u64 = 0xE4C0;
pub const HEAD_SEED_TAG: u64 = 0x6EAD;

pub fn derive_seed(components: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &c in components {
        state ^= splitmix64(c.wrapping_add(state));
        state = splitmix64(state);
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Arithmetic mean of a slice; 0.0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by n, not n - 1); 0.0 for an
/// empty slice.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}
