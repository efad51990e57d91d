//! Seeded, portable randomness.
//!
//! Every randomized operation in the pipeline (cohort draws, KMeans++
//! seeding, dataset subsampling, mock embeddings) goes through [`Pcg64`], a
//! PCG-family generator with a stable cross-platform stream for a given
//! seed. Re-running any stage with the same seed reproduces its output
//! bit for bit.

use rand::Rng;
use rand::SeedableRng;
pub use rand_pcg::Pcg64;
use sha2::{Digest, Sha256};

/// A generator seeded directly from a `u64`.
pub fn seeded(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

/// A generator for a named substream of `seed`.
///
/// Distinct labels give statistically independent streams, so per-user or
/// per-stage draws don't depend on iteration order elsewhere.
pub fn substream(seed: u64, label: &str) -> Pcg64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    Pcg64::from_seed(bytes)
}

/// Draws `k` distinct indices from `0..n` by partial Fisher-Yates shuffle.
///
/// Returns them in draw order; callers wanting a canonical order sort the
/// result. Panics if `k > n`.
pub fn sample_indices(rng: &mut Pcg64, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Draws one index with probability proportional to `weights[i]`.
///
/// Zero-weight entries are never chosen. Panics if all weights are zero or
/// any weight is negative.
pub fn weighted_index(rng: &mut Pcg64, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    assert!(
        total > 0.0 && weights.iter().all(|w| *w >= 0.0),
        "weights must be non-negative with a positive sum"
    );
    let draw = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc {
            return i;
        }
    }
    // Rounding can push the accumulator fractionally below `total`; land on
    // the last positive-weight entry.
    weights
        .iter()
        .rposition(|w| *w > 0.0)
        .expect("positive total implies a positive weight")
}
