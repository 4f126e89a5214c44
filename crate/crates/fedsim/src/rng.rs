//! Seeded random streams and pinned sampling primitives.
//!
//! Every source of randomness in a run is a named stream derived from the
//! global seed by hashing, so adding rounds or switching algorithms never
//! perturbs an unrelated stream (data shuffles, client selection, init).
//! The samplers are written out here instead of delegating to a
//! distributions crate so draws stay identical across platforms and
//! dependency upgrades.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Stream for a (seed, label) pair.
pub fn stream(seed: u64, label: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Stream for a (seed, label, index) triple, e.g. per-client batching.
pub fn indexed_stream(seed: u64, label: &str, index: usize) -> ChaCha20Rng {
    stream(seed, &format!("{label}/{index}"))
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Uniform sample of `k` distinct values from `0..n`, ascending order.
pub fn sample_without_replacement<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Standard normal draw via the Marsaglia polar method.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Gamma(alpha, 1) draw via the Marsaglia-Tsang squeeze method.
pub fn gamma<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    assert!(alpha > 0.0, "gamma needs alpha > 0");
    if alpha < 1.0 {
        // Boost: Gamma(a) = Gamma(a + 1) * U^(1/a)
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        return gamma(alpha + 1.0, rng) * u.powf(1.0 / alpha);
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Point on the `n`-simplex from Dirichlet(alpha * 1).
pub fn dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(n >= 1);
    let draws: Vec<f64> = (0..n).map(|_| gamma(alpha, rng)).collect();
    let total: f64 = draws.iter().sum();
    if total == 0.0 {
        // All gammas underflowed (tiny alpha); fall back to a single winner.
        let winner = rng.gen_range(0..n);
        let mut p = vec![0.0; n];
        p[winner] = 1.0;
        return p;
    }
    draws.iter().map(|g| g / total).collect()
}
