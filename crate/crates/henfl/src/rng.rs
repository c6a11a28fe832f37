//! Deterministic randomness for every stochastic stage of the pipeline.
//!
//! All randomness in this crate flows from a single `u64` master seed through
//! the helpers here. The generator is ChaCha8; uniform doubles and Gaussian
//! draws are produced by the explicit transforms below rather than by a
//! distribution library, so the exact bit stream is pinned by this file:
//!
//! * uniform in `[0,1)`: take the top 53 bits of a `u64` and scale by 2⁻⁵³;
//! * uniform in `(0,1]`: top 53 bits plus one, scaled by 2⁻⁵³;
//! * Gaussian: Box-Muller, `z0 = sqrt(-2 ln u1) * cos(2π u2)` with
//!   `u1 ∈ (0,1]`, `u2 ∈ [0,1)`, and `z1` (the `sin` twin) cached for the
//!   next draw;
//! * seed derivation: two SplitMix64 rounds over `base`, `tag`, `index`.
//!
//! Identical seeds therefore reproduce identical runs. The only platform
//! dependence left is `ln`/`cos`/`sin` from the system libm, which agree on
//! mainstream targets for these argument ranges.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream tags for [`derive_seed`], one per independent consumer of
/// randomness. Keeping them distinct means adding a consumer never shifts
/// the draws seen by another.
pub mod tags {
    pub const NOISE_TRAIN: u64 = 0x6e6f_6973_652d_7472; // "noise-tr"
    pub const NOISE_TEST: u64 = 0x6e6f_6973_652d_7465; // "noise-te"
    pub const NOISE_SAMPLES: u64 = 0x6e6f_6973_652d_7361; // "noise-sa"
    pub const MODEL_INIT: u64 = 0x6d6f_6465_6c2d_696e; // "model-in"
    pub const SHARD: u64 = 0x7368_6172_645f_5f5f; // "shard___"
    pub const CLIENT: u64 = 0x636c_6965_6e74_5f5f; // "client__"
    pub const ROUND: u64 = 0x726f_756e_645f_5f5f; // "round___"
    pub const EPOCH: u64 = 0x6570_6f63_685f_5f5f; // "epoch___"
    pub const BATCH: u64 = 0x6261_7463_685f_5f5f; // "batch___"
    pub const SUBSET: u64 = 0x7375_6273_6574_5f5f; // "subset__"
    pub const IMAGE: u64 = 0x696d_6167_655f_5f5f; // "image___"
}

/// One SplitMix64 finalization round.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `base` for the stream named by `tag` at `index`.
///
/// Pure function of its arguments; independent of platform and call order.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(tag)).wrapping_add(index))
}

/// Seeded ChaCha8 generator, the crate-wide uniform source.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform double in `[0, 1)` from the top 53 bits of one `u64`.
pub fn next_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform double in `(0, 1]`, for arguments of `ln`.
pub fn next_unit_open_zero(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)` by rejection sampling, bias-free.
pub fn next_below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    assert!(n > 0, "next_below requires n > 0");
    let zone = u64::MAX - u64::MAX % n;
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// Fisher-Yates permutation of `0..n` from a seed.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = next_below(&mut rng, (i + 1) as u64) as usize;
        indices.swap(i, j);
    }
    indices
}

/// Seeded stream of `N(0, sigma²)` draws with an exact draw counter.
///
/// Box-Muller produces values in pairs; the second of each pair is cached so
/// that `draws()` counts exactly the number of Gaussians handed out.
pub struct GaussianSource {
    rng: ChaCha8Rng,
    sigma: f64,
    spare: Option<f64>,
    draws: u64,
}

impl GaussianSource {
    pub fn new(seed: u64, sigma: f64) -> Self {
        Self {
            rng: rng_from_seed(seed),
            sigma,
            spare: None,
            draws: 0,
        }
    }

    /// Next draw from `N(0, sigma²)`.
    pub fn sample(&mut self) -> f64 {
        self.draws += 1;
        if let Some(z) = self.spare.take() {
            return z * self.sigma;
        }
        let u1 = next_unit_open_zero(&mut self.rng);
        let u2 = next_unit(&mut self.rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos() * self.sigma
    }

    /// Number of Gaussian values produced so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }
}
