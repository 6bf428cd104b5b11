//! A two-layer ReLU network used as feature extractor and attack target.
//!
//! `input -> relu(W1 x + b1) -> softmax(W2 h + b2)`
//!
//! Weights are kept f32-representable so that checkpoints round-trip exactly.
//! All arithmetic is f64.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{self, Decoder, Encoder};
use crate::corruptions::CorruptionSuite;
use crate::datastore::Dataset;
use crate::error::{check_len, Error, Result};
use crate::math::{self, Matrix};

const MAGIC: &[u8; 4] = b"EPBB";
const VERSION: u32 = 1;

/// Which layer of the backbone supplies embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingLayerId {
    /// Post-ReLU hidden activations (the penultimate-layer analog).
    HiddenRelu,
    /// Softmax output probabilities.
    SoftmaxProbs,
}

impl EmbeddingLayerId {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Self::HiddenRelu => 0,
            Self::SoftmaxProbs => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::HiddenRelu),
            1 => Some(Self::SoftmaxProbs),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::HiddenRelu => "hidden",
            Self::SoftmaxProbs => "probs",
        }
    }
}

impl fmt::Display for EmbeddingLayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingLayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" | "hidden-relu" => Ok(Self::HiddenRelu),
            "probs" | "softmax" | "softmax-probs" => Ok(Self::SoftmaxProbs),
            other => Err(Error::Parameter(format!(
                "unknown layer `{other}` (expected `hidden` or `probs`)"
            ))),
        }
    }
}

/// Scalar objective whose input gradient is requested from [`Backbone::input_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `-log p[target]`.
    CrossEntropy(usize),
    /// `-Σ q_c log p_c` against an arbitrary target distribution.
    SoftCrossEntropy(Vec<f64>),
    /// The linear functional `g · probs`.
    ProbsCotangent(Vec<f64>),
    /// The linear functional `g · hidden`.
    HiddenCotangent(Vec<f64>),
}

/// Activations from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl Backbone {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization for weights and biases.
    pub fn init(n_inputs: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if n_inputs == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Parameter(format!(
                "backbone dims must be positive with at least 2 classes (got n={n_inputs}, h={hidden}, C={classes})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |len: usize, fan_in: usize| -> Vec<f64> {
            let lim = 1.0 / (fan_in as f64).sqrt();
            (0..len)
                .map(|_| rng.random_range(-lim..=lim) as f32 as f64)
                .collect()
        };
        let w1 = Matrix::from_vec(hidden, n_inputs, uniform(hidden * n_inputs, n_inputs))?;
        let b1 = uniform(hidden, n_inputs);
        let w2 = Matrix::from_vec(classes, hidden, uniform(classes * hidden, hidden))?;
        let b2 = uniform(classes, hidden);
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn from_parts(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        check_len("b1", w1.rows(), b1.len())?;
        check_len("w2 columns", w1.rows(), w2.cols())?;
        check_len("b2", w2.rows(), b2.len())?;
        let mut m = Self { w1, b1, w2, b2 };
        if !m.is_finite() {
            return Err(Error::NonFinite { layer: "weights" });
        }
        m.quantize();
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.rows()
    }

    pub fn embedding_dim(&self, layer: EmbeddingLayerId) -> usize {
        match layer {
            EmbeddingLayerId::HiddenRelu => self.hidden_dim(),
            EmbeddingLayerId::SoftmaxProbs => self.num_classes(),
        }
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }

    fn quantize(&mut self) {
        math::quantize(self.w1.as_mut_slice());
        math::quantize(&mut self.b1);
        math::quantize(self.w2.as_mut_slice());
        math::quantize(&mut self.b2);
    }

    pub fn activations(&self, x: &[f64]) -> Result<Activations> {
        check_len("backbone input", self.input_dim(), x.len())?;
        let mut pre_hidden = self.b1.clone();
        for (a, row) in pre_hidden.iter_mut().zip(self.w1.iter_rows()) {
            *a += math::dot(row, x);
        }
        let hidden: Vec<f64> = pre_hidden.iter().map(|&a| a.max(0.0)).collect();
        let mut probs = self.b2.clone();
        for (z, row) in probs.iter_mut().zip(self.w2.iter_rows()) {
            *z += math::dot(row, &hidden);
        }
        math::softmax_in_place(&mut probs);
        if !probs.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite { layer: "softmax" });
        }
        Ok(Activations {
            pre_hidden,
            hidden,
            probs,
        })
    }

    /// Returns `(hidden, probs)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = self.activations(x)?;
        Ok((a.hidden, a.probs))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(x)?.probs)
    }

    /// Raw (unnormalized) embedding of `x` at `layer`.
    pub fn embed(&self, x: &[f64], layer: EmbeddingLayerId) -> Result<Vec<f64>> {
        let (hidden, probs) = self.forward(x)?;
        Ok(match layer {
            EmbeddingLayerId::HiddenRelu => hidden,
            EmbeddingLayerId::SoftmaxProbs => probs,
        })
    }

    /// Gradient of `loss` with respect to the input, by backpropagation.
    pub fn input_gradient(&self, x: &[f64], loss: &LossSpec) -> Result<Vec<f64>> {
        let act = self.activations(x)?;
        let d_hidden = self.hidden_cotangent(&act, loss)?;
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&act.pre_hidden)
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect();
        let mut grad = vec![0.0; self.input_dim()];
        self.w1.matvec_t_into(&d_pre, &mut grad);
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                layer: "input gradient",
            });
        }
        Ok(grad)
    }

    fn logit_cotangent(&self, probs: &[f64], loss: &LossSpec) -> Result<Option<Vec<f64>>> {
        let c = self.num_classes();
        let dz = match loss {
            LossSpec::CrossEntropy(t) => {
                if *t >= c {
                    return Err(Error::Parameter(format!("target class {t} >= {c}")));
                }
                let mut g = probs.to_vec();
                g[*t] -= 1.0;
                g
            }
            LossSpec::SoftCrossEntropy(q) => {
                check_len("soft target", c, q.len())?;
                let mass: f64 = q.iter().sum();
                probs.iter().zip(q).map(|(p, q)| p * mass - q).collect()
            }
            LossSpec::ProbsCotangent(g) => {
                check_len("probs cotangent", c, g.len())?;
                let pg = math::dot(probs, g);
                probs.iter().zip(g).map(|(p, g)| p * (g - pg)).collect()
            }
            LossSpec::HiddenCotangent(_) => return Ok(None),
        };
        if !dz.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: "logits" });
        }
        Ok(Some(dz))
    }

    fn hidden_cotangent(&self, act: &Activations, loss: &LossSpec) -> Result<Vec<f64>> {
        if let LossSpec::HiddenCotangent(g) = loss {
            check_len("hidden cotangent", self.hidden_dim(), g.len())?;
            return Ok(g.clone());
        }
        let dz = self.logit_cotangent(&act.probs, loss)?.unwrap();
        let mut dh = vec![0.0; self.hidden_dim()];
        self.w2.matvec_t_into(&dz, &mut dh);
        Ok(dh)
    }

    /// Jacobian of the softmax output with respect to the input, `C × n`.
    pub fn probs_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let c = self.num_classes();
        let mut jac = Matrix::zeros(c, self.input_dim());
        for class in 0..c {
            let mut e = vec![0.0; c];
            e[class] = 1.0;
            let row = self.input_gradient(x, &LossSpec::ProbsCotangent(e))?;
            jac.row_mut(class).copy_from_slice(&row);
        }
        Ok(jac)
    }

    /// Mean cross-entropy over a dataset.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in data.iter() {
            let p = self.predict_proba(x)?;
            total -= p[y].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / data.len() as f64)
    }

    /// Serialized checkpoint bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.u32(self.input_dim() as u32);
        e.u32(self.hidden_dim() as u32);
        e.u32(self.num_classes() as u32);
        e.f32s(self.w1.as_slice());
        e.f32s(&self.b1);
        e.f32s(self.w2.as_slice());
        e.f32s(&self.b2);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, VERSION)?;
        let n = d.usize32()?;
        let h = d.usize32()?;
        let c = d.usize32()?;
        let w1 = Matrix::from_vec(h, n, d.f32s(h * n)?)?;
        let b1 = d.f32s(h)?;
        let w2 = Matrix::from_vec(c, h, d.f32s(c * h)?)?;
        let b2 = d.f32s(c)?;
        d.finish()?;
        Self::from_parts(w1, b1, w2, b2)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// When set, each sample is corrupted with probability 0.5 by a random
    /// suite member at a random severity before the forward pass.
    pub augmentation: Option<CorruptionSuite>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Backbone,
    /// Mean clean cross-entropy of the initial model.
    pub initial_loss: f64,
    /// Mean clean cross-entropy of the trained model.
    pub final_loss: f64,
    /// Running mean loss over each epoch's (possibly augmented) samples.
    pub epoch_losses: Vec<f64>,
}

const AUGMENT_PROB: f64 = 0.5;

/// Minibatch SGD on cross-entropy.
pub fn train(model: Backbone, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    check_len("dataset image size", model.input_dim(), data.input_dim())?;
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::Parameter(format!(
            "label {bad} out of range for {} classes",
            model.num_classes()
        )));
    }

    let initial_loss = model.mean_loss(data)?;
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = Grads::zeros_like(&model);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let label = data.label(i);
                let augmented;
                let x = match &cfg.augmentation {
                    Some(suite) if rng.random_bool(AUGMENT_PROB) => {
                        let which = rng.random_range(0..suite.len());
                        let severity = rng.random_range(1..=5u8);
                        let seed = rng.random::<u64>();
                        augmented = suite.apply_index(
                            which,
                            data.image(i),
                            data.width(),
                            severity,
                            seed,
                        )?;
                        &augmented[..]
                    }
                    _ => data.image(i),
                };
                epoch_loss += grads.accumulate(&model, x, label).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch,
                        loss: f64::INFINITY,
                    },
                    other => other,
                })?;
            }
            grads.step(&mut model, cfg.learning_rate / batch.len() as f64);
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }

    let final_loss = model.mean_loss(data)?;
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

struct Grads {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl Grads {
    fn zeros_like(m: &Backbone) -> Self {
        Self {
            w1: Matrix::zeros(m.w1.rows(), m.w1.cols()),
            b1: vec![0.0; m.b1.len()],
            w2: Matrix::zeros(m.w2.rows(), m.w2.cols()),
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn clear(&mut self) {
        self.w1.as_mut_slice().fill(0.0);
        self.b1.fill(0.0);
        self.w2.as_mut_slice().fill(0.0);
        self.b2.fill(0.0);
    }

    /// Adds the parameter gradient of `-log p[label]` and returns the loss.
    fn accumulate(&mut self, m: &Backbone, x: &[f64], label: usize) -> Result<f64> {
        let act = m.activations(x)?;
        let loss = -act.probs[label].max(f64::MIN_POSITIVE).ln();
        let mut dz = act.probs.clone();
        dz[label] -= 1.0;
        for (c, &g) in dz.iter().enumerate() {
            math::axpy(g, &act.hidden, self.w2.row_mut(c));
            self.b2[c] += g;
        }
        let mut dh = vec![0.0; m.hidden_dim()];
        m.w2.matvec_t_into(&dz, &mut dh);
        for (j, (&g, &a)) in dh.iter().zip(&act.pre_hidden).enumerate() {
            if a > 0.0 {
                math::axpy(g, x, self.w1.row_mut(j));
                self.b1[j] += g;
            }
        }
        Ok(loss)
    }

    fn step(&self, m: &mut Backbone, lr: f64) {
        math::axpy(-lr, self.w1.as_slice(), m.w1.as_mut_slice());
        math::axpy(-lr, &self.b1, &mut m.b1);
        math::axpy(-lr, self.w2.as_slice(), m.w2.as_mut_slice());
        math::axpy(-lr, &self.b2, &mut m.b2);
        m.quantize();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Split;

    fn identity_model() -> Backbone {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        Backbone::from_parts(eye.clone(), vec![0.0; 2], eye, vec![0.0; 2]).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let m = Backbone::from_parts(
            Matrix::zeros(3, 5),
            vec![0.0; 3],
            Matrix::zeros(4, 3),
            vec![0.0; 4],
        )
        .unwrap();
        let (_, p) = m.forward(&[0.3, 0.1, 0.9, 0.0, 1.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_network_softmax_values() {
        // e/(e+1) and 1/(e+1), evaluated independently at 50 digits.
        const HI: f64 = 0.731_058_578_630_004_9;
        const LO: f64 = 0.268_941_421_369_995_1;
        let (h, p) = identity_model().forward(&[1.0, 0.0]).unwrap();
        assert_eq!(h, vec![1.0, 0.0]);
        assert!((p[0] - HI).abs() < 1e-15);
        assert!((p[1] - LO).abs() < 1e-15);
    }

    #[test]
    fn negative_preactivation_is_clamped() {
        let (h, _) = identity_model().forward(&[-0.5, 0.2]).unwrap();
        assert_eq!(h[0], 0.0);
        assert_eq!(h[1], 0.2);
    }

    #[test]
    fn shape_error_on_wrong_input() {
        assert!(matches!(
            identity_model().forward(&[1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn embed_matches_forward() {
        let m = Backbone::init(6, 4, 3, 9).unwrap();
        let x = [0.1, 0.5, 0.2, 0.9, 0.3, 0.7];
        let (h, p) = m.forward(&x).unwrap();
        assert_eq!(m.embed(&x, EmbeddingLayerId::SoftmaxProbs).unwrap(), p);
        assert_eq!(m.embed(&x, EmbeddingLayerId::HiddenRelu).unwrap(), h);
        assert!(h.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_soft_target_has_zero_gradient() {
        let m = Backbone::init(6, 4, 3, 3).unwrap();
        let x = [0.4; 6];
        let p = m.predict_proba(&x).unwrap();
        let g = m
            .input_gradient(&x, &LossSpec::SoftCrossEntropy(p))
            .unwrap();
        assert!(math::l2_norm(&g) < 1e-12);
    }

    #[test]
    fn doubling_cotangent_doubles_gradient() {
        let m = Backbone::init(6, 4, 3, 3).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let g1 = m
            .input_gradient(&x, &LossSpec::ProbsCotangent(vec![1.0, -0.5, 0.25]))
            .unwrap();
        let g2 = m
            .input_gradient(&x, &LossSpec::ProbsCotangent(vec![2.0, -1.0, 0.5]))
            .unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = Dataset::new(Matrix::zeros(1, 4), vec![0], 2, 2, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 0,
            augmentation: None,
        };
        let m = Backbone::init(4, 3, 2, 0).unwrap();
        assert!(matches!(train(m, &data, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![(i % 2) as f64; 4]).collect();
        let data = Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            (0..8).map(|i| i % 2).collect(),
            2,
            2,
            Split::Train,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e300,
            batch_size: 2,
            seed: 0,
            augmentation: None,
        };
        let m = Backbone::init(4, 3, 2, 0).unwrap();
        assert!(matches!(train(m, &data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Backbone::init(10, 5, 3, 77).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"EPBB");
        assert_eq!(bytes.len(), 4 + 4 + 12 + 4 * (50 + 5 + 15 + 3));
        let back = Backbone::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }
}
