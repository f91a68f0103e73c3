//! Seeding discipline: one global `u64` seed, deterministically mixed into
//! per-purpose streams. Every random draw in the crate flows through a
//! [`ChaCha8Rng`] constructed from a derived seed, so runs are bit-identical
//! across platforms regardless of iteration or thread scheduling.

use rand::Rng;
use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

use crate::fmath;
use crate::tensor::Tensor;

/// SplitMix64 finalizer; good avalanche for combining seed components.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of seed components (global seed, epoch, sample id,
/// purpose tag, ...) into one stream seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3; // pi fraction, arbitrary non-zero start
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Stream RNG for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed tags distinguishing the independent random streams of a run.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const FRAME: u64 = 3;
    pub const SHIFT: u64 = 4;
    pub const BATCH_ORDER: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const HEAD: u64 = 8;
}

/// Standard normal via Box–Muller on `libm`, keeping the whole crate free of
/// platform-dependent transcendentals.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0,1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// Normal draw truncated to ±2σ by resampling.
pub fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Fills a tensor with truncated-normal values.
pub fn fill_truncated_normal(t: &mut Tensor, sigma: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = truncated_normal(rng, sigma);
    }
}

/// `k` distinct indices drawn uniformly from `0..n`, ascending order.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> alloc::vec::Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> alloc::vec::Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: alloc::vec::Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Random derangement of `0..n` (no fixed points), by rejection.
pub fn derangement(rng: &mut ChaCha8Rng, n: usize) -> alloc::vec::Vec<usize> {
    assert!(n >= 2, "derangement needs at least 2 elements");
    loop {
        let p = permutation(rng, n);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Uniform integer in `0..n`.
pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
