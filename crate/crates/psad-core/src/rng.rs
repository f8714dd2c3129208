//! Seed derivation and deterministic sampling helpers.
//!
//! One master seed is split into purpose-specific streams so that, e.g.,
//! changing the number of training steps never perturbs data generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    splitmix64(master ^ fnv1a(purpose.as_bytes()))
}

/// Sub-seed additionally keyed by an index (session, step, grid point...).
pub fn derive_seed_indexed(master: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, purpose) ^ splitmix64(index))
}

pub fn rng_for(master: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose))
}

pub fn rng_for_indexed(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(master, purpose, index))
}

/// Standard normal via Box-Muller; two uniform draws per sample.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sample `k` distinct values from `0..n` (Floyd's algorithm), sorted.
pub fn sample_distinct(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} distinct from {n}");
    let mut chosen = Vec::with_capacity(k);
    for j in (n - k)..n {
        let t = rng.random_range(0..=j);
        if chosen.contains(&t) {
            chosen.push(j);
        } else {
            chosen.push(t);
        }
    }
    chosen.sort_unstable();
    chosen
}
