//! Fixtures shared by the criterion benches under `benches/`.

use epcache::math::{self, Matrix};
use epcache::{stream_rng, Backbone, Cache, EmbeddingLayerId};
use rand::Rng;

/// Entries and key width of the benchmark's hidden-layer cache.
pub const BENCH_ENTRIES: usize = 5600;
pub const BENCH_DIM: usize = 72;
pub const BENCH_CLASSES: usize = 10;

pub fn unit_rows(rows: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = stream_rng(seed, 0);
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = math::l2_norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Matrix::from_rows(&data).unwrap()
}

/// A cache of random unit keys with round-robin one-hot labels.
pub fn random_cache(entries: usize, dim: usize, seed: u64) -> Cache {
    let values: Vec<Vec<f64>> = (0..entries)
        .map(|i| {
            let mut v = vec![0.0; BENCH_CLASSES];
            v[i % BENCH_CLASSES] = 1.0;
            v
        })
        .collect();
    Cache::new(
        unit_rows(entries, dim, seed),
        Matrix::from_rows(&values).unwrap(),
        50.0,
        EmbeddingLayerId::HiddenRelu,
        None,
    )
    .unwrap()
}

/// An untrained backbone shaped like the benchmark recipe, and an input.
pub fn backbone_and_input(seed: u64) -> (Backbone, Vec<f64>) {
    let model = Backbone::init(256, BENCH_DIM, BENCH_CLASSES, seed).unwrap();
    let mut rng = stream_rng(seed, 1);
    let x = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
    (model, x)
}
