//! Batch execution of independent trials: Monte Carlo attack campaigns,
//! reliability sweeps, repeated scenario runs.
//!
//! Every trial derives its own RNG seed from the master seed and the trial's
//! index, so results are identical whether trials run on one thread or many.
//! With the default `parallel` feature the batch helpers fan out over rayon;
//! without it they run sequentially with the same results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Mixes a master seed with a stream index into an independent trial seed
/// (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps `f` over trial indices `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn indexed_map<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn indexed_map<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    indexed_map_seq(n, f)
}

/// Sequential reference path; the criterion bench compares this against the
/// parallel path.
pub fn indexed_map_seq<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Counts trial indices in `0..n` for which `f` holds.
#[cfg(feature = "parallel")]
pub fn indexed_count<F>(n: u64, f: F) -> u64
where
    F: Fn(u64) -> bool + Sync + Send,
{
    (0..n).into_par_iter().filter(|&i| f(i)).count() as u64
}

#[cfg(not(feature = "parallel"))]
pub fn indexed_count<F>(n: u64, f: F) -> u64
where
    F: Fn(u64) -> bool + Sync + Send,
{
    indexed_count_seq(n, f)
}

pub fn indexed_count_seq<F>(n: u64, f: F) -> u64
where
    F: Fn(u64) -> bool + Sync + Send,
{
    (0..n).filter(|&i| f(i)).count() as u64
}

/// One decode trial of a random 4-digit code through the noisy analogue
/// channel at the given mark/space timing. Used by the reliability sweep.
pub fn markspace_trial(mark_ms: u32, space_ms: u32, snr_db: f64, seed: u64) -> bool {
    use crate::dtmf::{apply_noise, decode, symbols_from_str, synthesize, NoiseModel, TimingConfig};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let code = crate::domain::generate_challenge(4, &mut rng).expect("n=4 is valid");
    let symbols = symbols_from_str(code.digits()).expect("digits are DTMF symbols");
    let cfg = TimingConfig::new(mark_ms, space_ms);
    let clean = synthesize(&symbols, &cfg, crate::dtmf::DEFAULT_SAMPLE_RATE);
    let noisy = apply_noise(&clean, &NoiseModel::AdditiveGaussian { snr_db }, &mut rng);
    decode(&noisy, &cfg) == symbols
}

/// Success count over `trials` random codes at one (mark, space) sweep
/// point. Trial seeds are derived from the point coordinates so a point's
/// result does not depend on which other points are swept.
pub fn markspace_successes(
    mark_ms: u32,
    space_ms: u32,
    trials: u64,
    snr_db: f64,
    master_seed: u64,
) -> u64 {
    let point = ((mark_ms as u64) << 40) | ((space_ms as u64) << 20);
    indexed_count(trials, move |t| {
        markspace_trial(mark_ms, space_ms, snr_db, derive_seed(master_seed, point | t))
    })
}
