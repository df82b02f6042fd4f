//! Seeded randomness.
//!
//! Everything random in the crate flows from a [`ChaCha20Rng`] built with
//! `seed_from_u64`. Gaussian draws use the Box–Muller transform on two
//! uniform `u64`-derived draws so the sequence depends only on the ChaCha20
//! stream, which is what the checkpoint manifests name as the A generator.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Matrix;

pub type SeededRng = ChaCha20Rng;

/// Name recorded in manifests for the projection generator.
pub const PROJECTION_RNG: &str = "chacha20-seed_from_u64/box-muller";

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal draw.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    // 1 - u lies in (0, 1], so the log is finite.
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Matrix of iid standard normal entries, filled in row-major order.
pub fn gaussian_matrix(rng: &mut impl RngCore, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("gaussian draws are finite")
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut impl Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn shuffle<T>(rng: &mut impl Rng, items: &mut [T]) {
    items.shuffle(rng);
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
