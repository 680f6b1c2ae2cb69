//! Seeded fixtures shared by the kernel benchmarks.

use iirc_core::{build_benchmark, default_hierarchy, Benchmark, BenchmarkConfig, Dataset, Net};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A network of the default shape with `outputs` heads.
pub fn net(input: usize, outputs: usize) -> Net {
    Net::new(input, &[64, 64], outputs, &mut rng(1))
}

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// `rows` feature vectors of width `dim`.
pub fn features(rows: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..rows).map(|i| uniform(dim, -1.0, 1.0, seed + i as u64)).collect()
}

/// The default benchmark and its dataset.
pub fn default_benchmark() -> (Benchmark, Dataset) {
    build_benchmark(&default_hierarchy(), &BenchmarkConfig::default(), 0).expect("default benchmark builds")
}
