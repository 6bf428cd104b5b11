//! Helpers shared by the derivative checks and the acceptance run.
#![allow(dead_code)]

use epcache::math::{self, Matrix};
use epcache::{stream_rng, Backbone, Cache, EmbeddingLayerId};
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Largest entrywise deviation relative to the largest reference entry.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    math::linf_dist(analytic, reference) / scale
}

pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += STEP;
            lo[i] -= STEP;
            (f(&hi) - f(&lo)) / (2.0 * STEP)
        })
        .collect()
}

/// An input in [0.1, 0.9]^n whose hidden pre-activations all sit at least
/// `1e-2` from zero.
pub fn input_away_from_kinks(model: &Backbone, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..model.input_dim())
            .map(|_| rng.random_range(0.1..0.9))
            .collect();
        let act = model.activations(&x).unwrap();
        let active = act.hidden.iter().filter(|h| **h > 0.0).count();
        if act.pre_hidden.iter().all(|z| z.abs() > 1e-2) && active > 0 {
            return x;
        }
    }
}

pub fn random_model(seed: u64) -> (Backbone, Vec<f64>) {
    let mut rng = stream_rng(seed, 0);
    let n = rng.random_range(2..=12);
    let h = rng.random_range(2..=10);
    let c = rng.random_range(2..=5);
    let model = Backbone::init(n, h, c, seed).unwrap();
    let x = input_away_from_kinks(&model, &mut rng);
    (model, x)
}

pub fn hidden_cache(model: &Backbone, seed: u64, layer: EmbeddingLayerId) -> Cache {
    let mut rng = stream_rng(seed, 1);
    let k = rng.random_range(1..=20);
    let d = model.embedding_dim(layer);
    let c = model.num_classes();
    let keys: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
            let n = math::l2_norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let values: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut v = vec![0.0; c];
            v[i % c] = 1.0;
            v
        })
        .collect();
    let theta = rng.random_range(1.0..40.0);
    Cache::new(
        Matrix::from_rows(&keys).unwrap(),
        Matrix::from_rows(&values).unwrap(),
        theta,
        layer,
        None,
    )
    .unwrap()
}
