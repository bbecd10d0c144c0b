//! Input generators shared by the benchmarks.

use fedsketch::seed::mix64;

/// A deterministic dense vector of length `d` with entries in `[-1, 1)`.
pub fn dense_vector(d: usize, seed: u64) -> Vec<f64> {
    (0..d)
        .map(|q| (mix64(seed ^ q as u64) >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
        .collect()
}

/// `count` copies of the same `k`-sparse vector of norm `norm`.
pub fn sparse_pool(d: usize, k: usize, norm: f64, count: usize) -> Vec<Vec<f64>> {
    let mut v = vec![0.0; d];
    let a = norm / (k as f64).sqrt();
    for i in 0..k {
        v[i * (d / k)] = if i % 2 == 0 { a } else { -a };
    }
    vec![v; count]
}
