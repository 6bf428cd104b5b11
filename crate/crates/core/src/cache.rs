//! The episodic cache: unit-norm keys, probability-vector values, and an
//! inverse temperature `theta`.
//!
//! For a unit-norm query `q`, each entry gets a weight proportional to
//! `exp(theta * q·key_k)` and the prediction is the weight-averaged value row.
//! Weights are computed with the largest dot product subtracted inside the
//! exponent; the prediction is a ratio, so the shift cancels.
//!
//! Reductions over entries always run in ascending index order, so results do
//! not depend on how queries are scheduled across threads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EmbeddingLayerId, LossSpec};
use crate::codec::{self, Decoder, Encoder};
use crate::compression::PcaTransform;
use crate::datastore::{Dataset, LabeledEmbeddings};
use crate::error::{check_len, Error, Result};
use crate::eval::Classifier;
use crate::math::{self, Matrix};

const MAGIC: &[u8; 4] = b"EPCH";
const VERSION: u32 = 1;

const UNIT_TOL: f64 = 1e-6;

/// Used when no tuned value is available.
pub const DEFAULT_THETA: f64 = 50.0;

/// `{10, 20, ..., 90}`.
pub fn default_theta_grid() -> Vec<f64> {
    (1..=9).map(|i| 10.0 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMethod {
    /// Weighted average over every entry.
    Continuous,
    /// Weighted average over the `k` entries most similar to the query.
    Knn(usize),
}

impl std::fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrievalMethod::Continuous => f.write_str("continuous"),
            RetrievalMethod::Knn(k) => write!(f, "{k}-nn"),
        }
    }
}

impl std::str::FromStr for RetrievalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "continuous" {
            return Ok(RetrievalMethod::Continuous);
        }
        let k = s
            .strip_suffix("-nn")
            .or_else(|| s.strip_prefix("knn:"))
            .and_then(|k| k.parse().ok())
            .ok_or_else(|| {
                Error::Parameter(format!("unknown retrieval `{s}` (continuous | <k>-nn)"))
            })?;
        Ok(RetrievalMethod::Knn(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    keys: Matrix,
    values: Matrix,
    theta: f64,
    layer: EmbeddingLayerId,
    key_transform: Option<PcaTransform>,
}

/// Unit-l2 rescaling of `v`.
pub fn normalize_query(v: &[f64]) -> Result<Vec<f64>> {
    let n = math::l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroNorm { row: 0 });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cotangent of `v / |v|` pulled back to `v`: `(g - u (u·g)) / |v|`.
fn normalization_vjp(v: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let norm = math::l2_norm(v);
    let u = normalize_query(v)?;
    let ug = math::dot(&u, g);
    Ok(g.iter()
        .zip(&u)
        .map(|(gi, ui)| (gi - ui * ug) / norm)
        .collect())
}

/// Keys are the row-normalized embeddings, values their one-hot labels.
pub fn build_cache(emb: &LabeledEmbeddings, classes: usize, theta: f64) -> Result<Cache> {
    if emb.is_empty() {
        return Err(Error::Parameter("cannot build an empty cache".into()));
    }
    let mut keys = emb.vectors.clone();
    for i in 0..keys.rows() {
        let row = keys.row_mut(i);
        let n = math::l2_norm(row);
        if !(n > 0.0) {
            return Err(Error::ZeroNorm { row: i });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    let mut values = Matrix::zeros(emb.len(), classes);
    for (i, &y) in emb.labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Parameter(format!("label {y} >= {classes} classes")));
        }
        values.set(i, y, 1.0);
    }
    Cache::new(keys, values, theta, emb.layer, None)
}

impl Cache {
    pub fn new(
        keys: Matrix,
        values: Matrix,
        theta: f64,
        layer: EmbeddingLayerId,
        key_transform: Option<PcaTransform>,
    ) -> Result<Self> {
        check_len("cache values", keys.rows(), values.rows())?;
        if keys.rows() == 0 {
            return Err(Error::Parameter("cache needs at least one entry".into()));
        }
        if let Some(t) = &key_transform {
            check_len("transformed key dim", t.output_dim(), keys.cols())?;
        }
        let mut keys = keys;
        let mut values = values;
        math::quantize(keys.as_mut_slice());
        math::quantize(values.as_mut_slice());
        let cache = Self {
            keys,
            values,
            theta: 0.0,
            layer,
            key_transform,
        };
        for (i, k) in cache.keys.iter_rows().enumerate() {
            if (math::l2_norm(k) - 1.0).abs() > UNIT_TOL {
                return Err(Error::Parameter(format!("key {i} is not unit norm")));
            }
        }
        for (i, v) in cache.values.iter_rows().enumerate() {
            let s: f64 = v.iter().sum();
            if v.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > UNIT_TOL {
                return Err(Error::Parameter(format!(
                    "value {i} is not a probability vector"
                )));
            }
        }
        cache.with_theta(theta)
    }

    pub fn with_theta(mut self, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::Parameter(format!(
                "theta must be positive, got {theta}"
            )));
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn key_dim(&self) -> usize {
        self.keys.cols()
    }

    /// Dimension of the raw embeddings this cache accepts as queries.
    pub fn query_dim(&self) -> usize {
        self.key_transform
            .as_ref()
            .map_or(self.key_dim(), |t| t.input_dim())
    }

    pub fn num_classes(&self) -> usize {
        self.values.cols()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn layer(&self) -> EmbeddingLayerId {
        self.layer
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn key_transform(&self) -> Option<&PcaTransform> {
        self.key_transform.as_ref()
    }

    /// Bytes needed for the keys of a `entries × dim` cache stored as f32.
    pub fn key_storage_bytes(entries: u64, dim: u64) -> u64 {
        entries * dim * 4
    }

    /// Maps a raw embedding to a unit-norm query in key space.
    pub fn query(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        check_len("cache query", self.query_dim(), embedding.len())?;
        let unit = normalize_query(embedding)?;
        match &self.key_transform {
            Some(t) => t.apply(&unit),
            None => Ok(unit),
        }
    }

    fn dots(&self, query: &[f64]) -> Result<Vec<f64>> {
        check_len("query", self.key_dim(), query.len())?;
        Ok(self.keys.iter_rows().map(|k| math::dot(k, query)).collect())
    }

    /// `exp(theta * (q·key_k - max_j q·key_j))` for every entry.
    pub fn similarity_scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        let dots = self.dots(query)?;
        let max = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(dots
            .iter()
            .map(|&s| (self.theta * (s - max)).exp())
            .collect())
    }

    /// Indices of the `k` entries with the largest dot product, returned in
    /// ascending index order. Equal dot products prefer the lower index.
    fn top_k(dots: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..dots.len()).collect();
        let cmp = |a: &usize, b: &usize| dots[*b].total_cmp(&dots[*a]).then(a.cmp(b));
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable();
        idx
    }

    fn support(&self, dots: &[f64], method: RetrievalMethod) -> Result<Option<Vec<usize>>> {
        match method {
            RetrievalMethod::Continuous => Ok(None),
            RetrievalMethod::Knn(k) => {
                if k == 0 || k > self.len() {
                    return Err(Error::Parameter(format!(
                        "k = {k} must lie in [1, {}]",
                        self.len()
                    )));
                }
                if k == self.len() {
                    Ok(None)
                } else {
                    Ok(Some(Self::top_k(dots, k)))
                }
            }
        }
    }

    /// Similarity-weighted average of the value rows.
    pub fn predict(&self, query: &[f64], method: RetrievalMethod) -> Result<Vec<f64>> {
        let dots = self.dots(query)?;
        let support = self.support(&dots, method)?;
        let entries: Box<dyn Iterator<Item = usize>> = match &support {
            None => Box::new(0..self.len()),
            Some(idx) => Box::new(idx.iter().copied()),
        };
        let entries: Vec<usize> = entries.collect();
        let max = entries
            .iter()
            .map(|&k| dots[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; self.num_classes()];
        let mut total = 0.0;
        for &k in &entries {
            let w = (self.theta * (dots[k] - max)).exp();
            total += w;
            math::axpy(w, self.values.row(k), &mut out);
        }
        out.iter_mut().for_each(|p| *p /= total);
        Ok(out)
    }

    /// Softmax weights over all entries, plus the normalized query.
    fn weights(&self, query: &[f64]) -> Result<Vec<f64>> {
        let mut w = self.similarity_scores(query)?;
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    }

    /// Pulls a cotangent on the query back to the raw embedding.
    fn query_cotangent_to_embedding(&self, embedding: &[f64], g_query: &[f64]) -> Result<Vec<f64>> {
        let unit = normalize_query(embedding)?;
        let g_unit = match &self.key_transform {
            Some(t) => {
                let z = t.project(&unit)?;
                let g_z = normalization_vjp(&z, g_query)?;
                t.project_transpose(&g_z)
            }
            None => g_query.to_vec(),
        };
        normalization_vjp(embedding, &g_unit)
    }

    fn embedding_cotangent_to_input(
        &self,
        backbone: &Backbone,
        x: &[f64],
        g_embedding: Vec<f64>,
    ) -> Result<Vec<f64>> {
        let loss = match self.layer {
            EmbeddingLayerId::HiddenRelu => LossSpec::HiddenCotangent(g_embedding),
            EmbeddingLayerId::SoftmaxProbs => LossSpec::ProbsCotangent(g_embedding),
        };
        backbone.input_gradient(x, &loss)
    }

    /// Gradient with respect to `x` of `g · p(x)` for the continuous cache
    /// prediction `p(x)`.
    pub fn prediction_vjp(&self, backbone: &Backbone, x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        check_len("prediction cotangent", self.num_classes(), g.len())?;
        let emb = backbone.embed(x, self.layer)?;
        let q = self.query(&emb)?;
        let w = self.weights(&q)?;
        let a: Vec<f64> = self.values.iter_rows().map(|v| math::dot(v, g)).collect();
        let mean_a = math::dot(&w, &a);
        let mut g_q = vec![0.0; self.key_dim()];
        for (k, key) in self.keys.iter_rows().enumerate() {
            let ds = self.theta * w[k] * (a[k] - mean_a);
            if ds != 0.0 {
                math::axpy(ds, key, &mut g_q);
            }
        }
        let g_emb = self.query_cotangent_to_embedding(&emb, &g_q)?;
        let grad = self.embedding_cotangent_to_input(backbone, x, g_emb)?;
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                layer: "cache gradient",
            });
        }
        Ok(grad)
    }

    /// Gradient with respect to `x` of `-log p_target(x)` for the continuous
    /// cache, evaluated in the log domain so tiny target probabilities do not
    /// underflow.
    pub fn target_loss_gradient(
        &self,
        backbone: &Backbone,
        x: &[f64],
        target: usize,
    ) -> Result<Vec<f64>> {
        if target >= self.num_classes() {
            return Err(Error::Parameter(format!(
                "target class {target} out of range"
            )));
        }
        let emb = backbone.embed(x, self.layer)?;
        let q = self.query(&emb)?;
        let dots = self.dots(&q)?;
        let w = self.weights(&q)?;
        // Weights restricted to entries carrying mass on the target class.
        let log_t: Vec<f64> = self
            .values
            .iter_rows()
            .zip(&dots)
            .map(|(v, &s)| {
                if v[target] > 0.0 {
                    v[target].ln() + self.theta * s
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max_t = log_t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_t == f64::NEG_INFINITY {
            return Err(Error::NonFinite {
                layer: "cache target probability",
            });
        }
        let mut w_t: Vec<f64> = log_t.iter().map(|&l| (l - max_t).exp()).collect();
        let total_t: f64 = w_t.iter().sum();
        w_t.iter_mut().for_each(|v| *v /= total_t);

        let mut g_q = vec![0.0; self.key_dim()];
        for (k, key) in self.keys.iter_rows().enumerate() {
            let ds = -self.theta * (w_t[k] - w[k]);
            if ds != 0.0 {
                math::axpy(ds, key, &mut g_q);
            }
        }
        let g_emb = self.query_cotangent_to_embedding(&emb, &g_q)?;
        self.embedding_cotangent_to_input(backbone, x, g_emb)
    }

    /// Exact `C × n` Jacobian of `x -> embed -> normalize -> predict`
    /// (continuous retrieval).
    pub fn prediction_jacobian(&self, backbone: &Backbone, x: &[f64]) -> Result<Matrix> {
        let c = self.num_classes();
        let mut jac = Matrix::zeros(c, x.len());
        for class in 0..c {
            let mut e = vec![0.0; c];
            e[class] = 1.0;
            let row = self.prediction_vjp(backbone, x, &e)?;
            jac.row_mut(class).copy_from_slice(&row);
        }
        Ok(jac)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.usize32(self.len())?;
        e.usize32(self.key_dim())?;
        e.usize32(self.num_classes())?;
        e.f64(self.theta);
        e.u8(self.layer.tag());
        match &self.key_transform {
            None => e.u8(0),
            Some(t) => {
                e.u8(1);
                t.encode(&mut e)?;
            }
        }
        e.f32s(self.keys.as_slice());
        e.f32s(self.values.as_slice());
        Ok(e.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, VERSION)?;
        let k = d.usize32()?;
        let dim = d.usize32()?;
        let c = d.usize32()?;
        let theta = d.f64()?;
        let layer =
            EmbeddingLayerId::from_tag(d.u8()?).ok_or_else(|| d.malformed("unknown layer tag"))?;
        let transform = match d.u8()? {
            0 => None,
            1 => Some(PcaTransform::decode(&mut d)?),
            _ => return Err(d.malformed("bad transform flag")),
        };
        let keys = Matrix::from_vec(k, dim, d.f32s(k * dim)?)?;
        let values = Matrix::from_vec(k, c, d.f32s(k * c)?)?;
        let offset = d.offset();
        d.finish()?;
        Self::new(keys, values, theta, layer, transform).map_err(|e| Error::Malformed {
            offset,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A backbone feeding a cache: the full episodic-memory classifier.
#[derive(Debug, Clone, Copy)]
pub struct CacheModel<'a> {
    pub backbone: &'a Backbone,
    pub cache: &'a Cache,
    pub method: RetrievalMethod,
}

impl<'a> CacheModel<'a> {
    pub fn new(backbone: &'a Backbone, cache: &'a Cache, method: RetrievalMethod) -> Result<Self> {
        check_len(
            "cache query dim vs backbone layer",
            backbone.embedding_dim(cache.layer()),
            cache.query_dim(),
        )?;
        check_len("class count", backbone.num_classes(), cache.num_classes())?;
        Ok(Self {
            backbone,
            cache,
            method,
        })
    }
}

impl Classifier for CacheModel<'_> {
    fn num_classes(&self) -> usize {
        self.cache.num_classes()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let emb = self.backbone.embed(x, self.cache.layer())?;
        self.cache.predict(&self.cache.query(&emb)?, self.method)
    }

    /// k-NN caches use the continuous-cache gradient as a smooth surrogate.
    fn target_loss_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.cache.target_loss_gradient(self.backbone, x, target)
    }
}

/// Picks the grid value maximizing `accuracy`; ties go to the smallest value.
pub fn select_theta<F>(grid: &[f64], mut accuracy: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Parameter("theta grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &theta in &sorted {
        if !(theta > 0.0) {
            return Err(Error::Parameter(format!(
                "theta must be positive, got {theta}"
            )));
        }
        let acc = accuracy(theta)?;
        if acc > best.0 {
            best = (acc, theta);
        }
    }
    Ok(best.1)
}

/// Grid search for `theta` on validation accuracy of the continuous cache.
pub fn tune_theta(cache: &Cache, backbone: &Backbone, val: &Dataset, grid: &[f64]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Parameter("validation set is empty".into()));
    }
    select_theta(grid, |theta| {
        let c = cache.clone().with_theta(theta)?;
        let model = CacheModel::new(backbone, &c, RetrievalMethod::Continuous)?;
        crate::eval::accuracy(&model, val)
    })
}
