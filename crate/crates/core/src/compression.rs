//! Two ways of making a cache smaller: fewer dimensions per key (PCA) or
//! fewer keys (mini-batch k-means).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::codec::{Decoder, Encoder};
use crate::error::{check_len, Error, Result};
use crate::math::{self, Matrix};

/// Rows are processed this many at a time when accumulating covariance.
pub const PCA_BATCH: usize = 256;

const DEGENERATE_NORM: f64 = 1e-12;

/// Centering plus projection onto the leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    mean: Vec<f64>,
    /// `d_out × d`, orthonormal rows in descending-variance order.
    components: Matrix,
}

/// Streaming mean / scatter accumulator, merged one batch at a time.
struct Moments {
    count: f64,
    mean: Vec<f64>,
    scatter: nalgebra::DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; d],
            scatter: nalgebra::DMatrix::zeros(d, d),
        }
    }

    /// Chan et al. pairwise merge of the batch's moments into the running ones.
    fn update(&mut self, batch: &[&[f64]]) {
        let d = self.mean.len();
        let nb = batch.len() as f64;
        let mut bmean = vec![0.0; d];
        for row in batch {
            math::axpy(1.0 / nb, row, &mut bmean);
        }
        let mut centered = nalgebra::DMatrix::zeros(batch.len(), d);
        for (i, row) in batch.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = row[j] - bmean[j];
            }
        }
        let bscatter = centered.transpose() * &centered;
        let na = self.count;
        let n = na + nb;
        let delta: Vec<f64> = bmean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let dv = nalgebra::DVector::from_vec(delta.clone());
        self.scatter += bscatter + (&dv * dv.transpose()) * (na * nb / n);
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count = n;
    }
}

/// Fits the top `d_out` principal directions of `keys`, accumulating
/// covariance over fixed-size batches.
pub fn fit_pca(keys: &Matrix, d_out: usize) -> Result<PcaTransform> {
    let d = keys.cols();
    if d_out == 0 || d_out > d {
        return Err(Error::Parameter(format!(
            "PCA output dim {d_out} must lie in [1, {d}]"
        )));
    }
    if keys.rows() <= d_out {
        return Err(Error::Parameter(format!(
            "PCA needs more rows ({}) than output dims ({d_out})",
            keys.rows()
        )));
    }
    let mut moments = Moments::new(d);
    let rows: Vec<&[f64]> = keys.iter_rows().collect();
    for batch in rows.chunks(PCA_BATCH) {
        moments.update(batch);
    }
    let cov = moments.scatter / (moments.count - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = Matrix::zeros(d_out, d);
    for (r, &col) in order.iter().take(d_out).enumerate() {
        let v = eig.eigenvectors.column(col);
        // Deterministic sign: largest-magnitude coordinate positive.
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(r, j, sign * v[j]);
        }
    }
    let mut mean = moments.mean;
    math::quantize(&mut mean);
    math::quantize(components.as_mut_slice());
    Ok(PcaTransform { mean, components })
}

impl PcaTransform {
    pub fn from_parts(mean: Vec<f64>, components: Matrix) -> Result<Self> {
        check_len("PCA mean", components.cols(), mean.len())?;
        if components.rows() > components.cols() {
            return Err(Error::Parameter("PCA output dim exceeds input dim".into()));
        }
        Ok(Self { mean, components })
    }

    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    /// `components · (v - mean)`, without normalization.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("PCA input", self.input_dim(), v.len())?;
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out = vec![0.0; self.output_dim()];
        self.components.matvec_into(&centered, &mut out);
        Ok(out)
    }

    /// `componentsᵀ · g`.
    pub fn project_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        self.components.matvec_t_into(g, &mut out);
        out
    }

    /// Projection rescaled to unit l2 norm.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let z = self.project(v)?;
        let norm = math::l2_norm(&z);
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateQuery { norm });
        }
        Ok(z.iter().map(|x| x / norm).collect())
    }

    /// `mean + componentsᵀ · components · (v - mean)`.
    pub fn reconstruct(&self, v: &[f64]) -> Result<Vec<f64>> {
        let z = self.project(v)?;
        let mut out = self.project_transpose(&z);
        math::axpy(1.0, &self.mean, &mut out);
        Ok(out)
    }

    pub(crate) fn encode(&self, e: &mut Encoder) -> Result<()> {
        e.usize32(self.input_dim())?;
        e.usize32(self.output_dim())?;
        e.f32s(&self.mean);
        e.f32s(self.components.as_slice());
        Ok(())
    }

    pub(crate) fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let d_in = d.usize32()?;
        let d_out = d.usize32()?;
        let mean = d.f32s(d_in)?;
        let components = Matrix::from_vec(d_out, d_in, d.f32s(d_out * d_in)?)?;
        Self::from_parts(mean, components)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub n_clusters: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Cluster each class separately (values stay one-hot).
    pub per_class: bool,
}

impl KMeansConfig {
    pub fn new(n_clusters: usize, seed: u64) -> Self {
        Self {
            n_clusters,
            batch_size: 256,
            iterations: 100,
            seed,
            per_class: true,
        }
    }

    fn validate(&self, points: usize) -> Result<()> {
        if self.n_clusters == 0 || self.n_clusters > points {
            return Err(Error::Parameter(format!(
                "n_clusters = {} must lie in [1, {points}]",
                self.n_clusters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("k-means batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Unit-norm centroids, `M × d`.
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// Mean squared distance to the assigned seed centroid after k-means++.
    pub initial_objective: f64,
    /// Mean squared distance to the assigned (pre-normalization) centroid.
    pub final_objective: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(centroids: &Matrix, points: &Matrix) -> (Vec<usize>, Vec<f64>) {
    points.iter_rows().map(|x| nearest(centroids, x)).unzip()
}

fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![false; n];
    let mut picks = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    picks.push(first);
    chosen[first] = true;
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|x| sq_dist(x, points.row(first)))
        .collect();
    while picks.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| d2[i]).sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                if d2[i] > 0.0 {
                    pick = Some(i);
                    r -= d2[i];
                    if r <= 0.0 {
                        break;
                    }
                }
            }
            pick.unwrap()
        } else {
            // Every remaining point coincides with a seed.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        picks.push(next);
        chosen[next] = true;
        for (i, x) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, points.row(next)));
        }
    }
    points.select_rows(&picks)
}

/// Member means for `assignment`; empty clusters keep their previous centroid.
fn lloyd_means(points: &Matrix, assignment: &[usize], previous: &Matrix) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(previous.rows(), previous.cols());
    let mut counts = vec![0usize; previous.rows()];
    for (x, &c) in points.iter_rows().zip(assignment) {
        math::axpy(1.0, x, sums.row_mut(c));
        counts[c] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

fn objective(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignment)
        .map(|(x, &c)| sq_dist(x, centroids.row(c)))
        .sum::<f64>()
        / points.rows() as f64
}

/// Final assignment pass with one re-seed attempt for empty clusters, followed
/// by a mean update.
fn finalize(points: &Matrix, mut centroids: Matrix) -> Result<(Matrix, Vec<usize>)> {
    for attempt in 0..2 {
        let (assignment, dists) = assign_all(&centroids, points);
        let (means, counts) = lloyd_means(points, &assignment, &centroids);
        let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
        if empty.is_empty() {
            return Ok((means, assignment));
        }
        if attempt == 1 {
            return Err(Error::EmptyCluster { cluster: empty[0] });
        }
        // Farthest points (ties to lower index) become the new seeds.
        let mut by_dist: Vec<usize> = (0..points.rows()).collect();
        by_dist.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        for (&c, &p) in empty.iter().zip(&by_dist) {
            centroids.row_mut(c).copy_from_slice(points.row(p));
        }
    }
    unreachable!()
}

/// Mini-batch k-means with k-means++ seeding.
///
/// Each iteration draws `batch_size` points, assigns them to their nearest
/// centroid, then moves centroids toward members with rate `1 / count`, where
/// the count includes the seed point. A full assignment pass and a mean update
/// follow. If that ends above the seeding objective, the result is recomputed
/// from the seeds instead. Centroids are returned at unit norm.
pub fn minibatch_kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    cfg.validate(points.rows())?;
    let distinct = points
        .iter_rows()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<std::collections::HashSet<_>>()
        .len();
    if cfg.n_clusters > distinct {
        return Err(Error::Parameter(format!(
            "{} clusters requested but only {distinct} distinct points",
            cfg.n_clusters
        )));
    }
    let n = points.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeans_plus_plus(points, cfg.n_clusters, &mut rng);
    let (seed_assignment, _) = assign_all(&seeds, points);
    let initial_objective = objective(points, &seeds, &seed_assignment);

    let mut centroids = seeds.clone();
    let mut counts = vec![1usize; cfg.n_clusters];
    let batch = cfg.batch_size.min(n);
    let mut cached = Vec::with_capacity(batch);
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, n, batch);
        cached.clear();
        cached.extend(
            idx.iter()
                .map(|i| (i, nearest(&centroids, points.row(i)).0)),
        );
        for &(i, c) in &cached {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let x = points.row(i);
            for (m, xi) in centroids.row_mut(c).iter_mut().zip(x) {
                *m += eta * (xi - *m);
            }
        }
    }

    let (mut means, mut assignment) = finalize(points, centroids)?;
    let mut final_objective = objective(points, &means, &assignment);
    if final_objective > initial_objective {
        (means, assignment) = finalize(points, seeds)?;
        final_objective = objective(points, &means, &assignment);
    }

    for c in 0..means.rows() {
        let row = means.row_mut(c);
        let norm = math::l2_norm(row);
        if !(norm > DEGENERATE_NORM) {
            return Err(Error::ZeroNorm { row: c });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(KMeansResult {
        centroids: means,
        assignment,
        initial_objective,
        final_objective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Compression {
    /// Project keys onto `d_out` principal directions.
    Pca { d_out: usize },
    /// Replace keys by k-means centroids.
    Cluster(KMeansConfig),
}

/// Largest-remainder apportionment of `budget` over `counts`, at least one
/// per non-empty class and never more than the class holds.
pub fn class_budgets(counts: &[usize], budget: usize) -> Result<Vec<usize>> {
    let present = counts.iter().filter(|&&c| c > 0).count();
    let total: usize = counts.iter().sum();
    if budget < present {
        return Err(Error::Parameter(format!(
            "cluster budget {budget} is smaller than the {present} classes present"
        )));
    }
    if budget > total {
        return Err(Error::Parameter(format!(
            "cluster budget {budget} exceeds {total} cache entries"
        )));
    }
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| budget as f64 * c as f64 / total as f64)
        .collect();
    let mut out: Vec<usize> = counts
        .iter()
        .zip(&quota)
        .map(|(&c, &q)| {
            if c == 0 {
                0
            } else {
                (q.floor() as usize).clamp(1, c)
            }
        })
        .collect();
    let remainder = |i: usize| quota[i] - quota[i].floor();
    let mut assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
    while assigned < budget {
        let before = assigned;
        for &i in &order {
            if assigned == budget {
                break;
            }
            if out[i] < counts[i] {
                out[i] += 1;
                assigned += 1;
            }
        }
        debug_assert!(assigned > before);
    }
    // Minimum-one bumps can overshoot; trim from the largest allocations.
    while assigned > budget {
        let i = (0..out.len())
            .filter(|&i| out[i] > 1)
            .max_by(|&a, &b| {
                out[a]
                    .cmp(&out[b])
                    .then(remainder(b).total_cmp(&remainder(a)))
                    .then(b.cmp(&a))
            })
            .expect("budget >= present classes");
        out[i] -= 1;
        assigned -= 1;
    }
    Ok(out)
}

fn class_of(value: &[f64]) -> usize {
    math::argmax(value)
}

/// Builds a smaller cache with the same `theta` and layer.
pub fn compress_cache(cache: &Cache, method: &Compression) -> Result<Cache> {
    match method {
        Compression::Pca { d_out } => {
            if cache.key_transform().is_some() {
                return Err(Error::Parameter(
                    "cache keys are already PCA-compressed".into(),
                ));
            }
            let t = fit_pca(cache.keys(), *d_out)?;
            let rows: Vec<Vec<f64>> = cache
                .keys()
                .iter_rows()
                .map(|k| t.apply(k))
                .collect::<Result<_>>()?;
            Cache::new(
                Matrix::from_rows(&rows)?,
                cache.values().clone(),
                cache.theta(),
                cache.layer(),
                Some(t),
            )
        }
        Compression::Cluster(cfg) if cfg.per_class => {
            let c = cache.num_classes();
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, v) in cache.values().iter_rows().enumerate() {
                members[class_of(v)].push(i);
            }
            let counts: Vec<usize> = members.iter().map(Vec::len).collect();
            let budgets = class_budgets(&counts, cfg.n_clusters)?;
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for (class, idx) in members.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let sub = cache.keys().select_rows(idx);
                let sub_cfg = KMeansConfig {
                    n_clusters: budgets[class],
                    seed: cfg.seed.wrapping_add(class as u64),
                    ..cfg.clone()
                };
                let res = minibatch_kmeans(&sub, &sub_cfg)?;
                let mut onehot = vec![0.0; c];
                onehot[class] = 1.0;
                for row in res.centroids.iter_rows() {
                    keys.push(row.to_vec());
                    values.push(onehot.clone());
                }
            }
            Cache::new(
                Matrix::from_rows(&keys)?,
                Matrix::from_rows(&values)?,
                cache.theta(),
                cache.layer(),
                cache.key_transform().cloned(),
            )
        }
        Compression::Cluster(cfg) => {
            let res = minibatch_kmeans(cache.keys(), cfg)?;
            let m = res.centroids.rows();
            let mut values = Matrix::zeros(m, cache.num_classes());
            let mut counts = vec![0usize; m];
            for (i, &a) in res.assignment.iter().enumerate() {
                math::axpy(1.0, cache.values().row(i), values.row_mut(a));
                counts[a] += 1;
            }
            for (c, &n) in counts.iter().enumerate() {
                values.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
            }
            Cache::new(
                res.centroids,
                values,
                cache.theta(),
                cache.layer(),
                cache.key_transform().cloned(),
            )
        }
    }
}
