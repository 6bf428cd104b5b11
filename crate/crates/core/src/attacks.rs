//! Targeted l∞ PGD with a random start, and the white-, gray- and black-box
//! evaluation scenarios for backbone and cache classifiers.
//!
//! The budget is normalized: an input `x` may move by at most
//! `r = epsilon * max|x|` per coordinate, and stays inside `[0, 1]`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::cache::{Cache, CacheModel, RetrievalMethod};
use crate::datastore::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, Classifier};
use crate::math;
use crate::stream_rng;

pub const DEFAULT_EPSILONS: [f64; 6] = [0.01, 0.02, 0.04, 0.06, 0.08, 0.1];
pub const DEFAULT_STEPSIZE: f64 = 2.0 / 225.0;
pub const DEFAULT_ITERATIONS: usize = 10;
/// Budget used for single-number comparisons.
pub const HEADLINE_EPSILON: f64 = 0.06;

const TARGET_STREAM_SALT: u64 = 0x7461_7267_6574;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Absolute pixel units.
    pub stepsize: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            stepsize: DEFAULT_STEPSIZE,
            iterations: DEFAULT_ITERATIONS,
            random_start: true,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Parameter(format!(
                "epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter(
                "attack needs at least one iteration".into(),
            ));
        }
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return Err(Error::Parameter(format!(
                "stepsize must be positive, got {}",
                self.stepsize
            )));
        }
        Ok(())
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    /// Config for attacking sample `index`; its seed depends only on
    /// `(self.seed, index)`.
    pub fn for_sample(&self, index: usize) -> Self {
        Self {
            seed: stream_rng(self.seed, index as u64).random(),
            ..*self
        }
    }
}

/// Who the attacker gets gradients from.
#[derive(Debug, Clone, Copy)]
pub enum ThreatModel<'a> {
    /// The full evaluated model.
    WhiteBox,
    /// The backbone only; adversarial inputs are then scored on the cache.
    GrayBox,
    /// A separately trained surrogate backbone.
    BlackBox(&'a Backbone),
}

impl ThreatModel<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            ThreatModel::WhiteBox => "white",
            ThreatModel::GrayBox => "gray",
            ThreatModel::BlackBox(_) => "black",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub x_adv: Vec<f64>,
    pub success: bool,
    pub target: usize,
}

fn failed(x: &[f64], target: usize) -> AttackOutcome {
    AttackOutcome {
        x_adv: x.to_vec(),
        success: false,
        target,
    }
}

/// Errors that mean "this input broke the model" rather than a caller bug.
fn is_input_degeneracy(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. } | Error::ZeroNorm { .. } | Error::DegenerateQuery { .. }
    )
}

/// Targeted PGD. `predict` maps an input to class probabilities and `grad`
/// returns the gradient of `-log p_target` with respect to the input. A
/// failed attack returns the clean input.
pub fn pgd_targeted<P, G>(
    predict: P,
    grad: G,
    x: &[f64],
    target: usize,
    cfg: &AttackConfig,
) -> Result<AttackOutcome>
where
    P: Fn(&[f64]) -> Result<Vec<f64>>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let radius = cfg.epsilon * math::linf_norm(x);
    let lo: Vec<f64> = x.iter().map(|&v| v - radius).collect();
    let hi: Vec<f64> = x.iter().map(|&v| v + radius).collect();
    let project = |v: f64, i: usize| v.clamp(lo[i], hi[i]).clamp(0.0, 1.0);

    let mut adv = x.to_vec();
    if cfg.random_start && radius > 0.0 {
        let mut rng = stream_rng(cfg.seed, 0);
        for (i, a) in adv.iter_mut().enumerate() {
            *a = project(x[i] + rng.random_range(-radius..=radius), i);
        }
    }
    for _ in 0..cfg.iterations {
        let g = match grad(&adv) {
            Ok(g) => g,
            Err(e) if is_input_degeneracy(&e) => return Ok(failed(x, target)),
            Err(e) => return Err(e),
        };
        if g.len() != x.len() || !g.iter().all(|v| v.is_finite()) {
            return Ok(failed(x, target));
        }
        for (i, a) in adv.iter_mut().enumerate() {
            let step = if g[i] > 0.0 {
                cfg.stepsize
            } else if g[i] < 0.0 {
                -cfg.stepsize
            } else {
                0.0
            };
            *a = project(*a - step, i);
        }
    }
    let success = match predict(&adv) {
        Ok(p) => math::argmax(&p) == target,
        Err(e) if is_input_degeneracy(&e) => false,
        Err(e) => return Err(e),
    };
    let outcome = if success {
        AttackOutcome {
            x_adv: adv,
            success,
            target,
        }
    } else {
        failed(x, target)
    };
    debug_assert!(within_ball(x, &outcome.x_adv, cfg.epsilon));
    Ok(outcome)
}

/// Whether `adv` respects the normalized budget around `x` and the pixel box.
pub fn within_ball(x: &[f64], adv: &[f64], epsilon: f64) -> bool {
    let radius = epsilon * math::linf_norm(x);
    x.len() == adv.len()
        && adv.iter().all(|v| (0.0..=1.0).contains(v))
        && math::linf_dist(x, adv) <= radius + 1e-9
}

/// Uniform choice among the classes other than `true_label`, fixed by
/// `(seed, index)`.
pub fn target_selection(
    true_label: usize,
    classes: usize,
    seed: u64,
    index: usize,
) -> Result<usize> {
    if classes < 2 {
        return Err(Error::Parameter(format!(
            "targeted attacks need at least 2 classes, got {classes}"
        )));
    }
    if true_label >= classes {
        return Err(Error::Parameter(format!(
            "label {true_label} out of range for {classes} classes"
        )));
    }
    let mut rng = stream_rng(seed ^ TARGET_STREAM_SALT, index as u64);
    let t = rng.random_range(0..classes - 1);
    Ok(if t >= true_label { t + 1 } else { t })
}

/// Attacks every sample of `data` against `model`. Targets and random starts
/// depend only on `cfg.seed` and the sample index.
pub fn attack_dataset<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    cfg.validate()?;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let target = target_selection(data.label(i), data.classes(), cfg.seed, i)?;
            pgd_targeted(
                |x| model.predict_proba(x),
                |x| model.target_loss_gradient(x, target),
                data.image(i),
                target,
                &cfg.for_sample(i),
            )
        })
        .collect()
}

/// Top-1 accuracy on attacked inputs; inputs the model cannot embed count
/// as errors.
fn adversarial_accuracy<M: Classifier + ?Sized>(
    model: &M,
    outcomes: &[AttackOutcome],
    data: &Dataset,
) -> Result<f64> {
    let correct = outcomes
        .par_iter()
        .enumerate()
        .map(|(i, o)| match model.predict(&o.x_adv) {
            Ok(p) => Ok(usize::from(p == data.label(i))),
            Err(e) if is_input_degeneracy(&e) => Ok(0),
            Err(e) => Err(e),
        })
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub threat: String,
    pub epsilon: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub attack: AttackConfig,
    pub retrieval: String,
    pub notes: Vec<String>,
}

impl AccuracyTable {
    pub fn get(&self, model: &str, threat: &str, epsilon: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.threat == threat && r.epsilon == epsilon)
            .map(|r| r.top1)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["model", "threat", "epsilon", "top1"])?;
        for r in &self.rows {
            wtr.write_record([
                r.model.clone(),
                r.threat.clone(),
                r.epsilon.to_string(),
                format!("{:.6}", r.top1),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const BACKBONE_MODEL: &str = "backbone";
pub const CACHE_MODEL: &str = "cache";

/// Runs one threat scenario over `eps_list` (plus an `epsilon = 0` clean
/// column). `base` supplies the step size, iteration count and seed.
pub fn run_threat_scenario(
    threat: ThreatModel<'_>,
    backbone: &Backbone,
    cache: Option<&Cache>,
    method: RetrievalMethod,
    data: &Dataset,
    eps_list: &[f64],
    base: &AttackConfig,
) -> Result<AccuracyTable> {
    if eps_list.is_empty() {
        return Err(Error::Parameter("epsilon list is empty".into()));
    }
    if data.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let cache_model = cache
        .map(|c| CacheModel::new(backbone, c, method))
        .transpose()?;
    if matches!(threat, ThreatModel::GrayBox) && cache_model.is_none() {
        return Err(Error::Config("gray-box evaluation requires a cache".into()));
    }
    if let ThreatModel::BlackBox(surrogate) = threat {
        if surrogate == backbone {
            return Err(Error::Config(
                "black-box surrogate must differ from the evaluated backbone".into(),
            ));
        }
    }

    // Models scored under this threat.
    let mut evaluated: Vec<(&str, &dyn Classifier)> = Vec::new();
    if !matches!(threat, ThreatModel::GrayBox) {
        evaluated.push((BACKBONE_MODEL, backbone));
    }
    if let Some(cm) = &cache_model {
        evaluated.push((CACHE_MODEL, cm));
    }

    let name = threat.name();
    let mut rows = Vec::new();
    for &(model, m) in &evaluated {
        rows.push(AccuracyRow {
            model: model.into(),
            threat: name.into(),
            epsilon: 0.0,
            top1: eval::accuracy(m, data)?,
        });
    }
    for &eps in eps_list {
        let cfg = base.with_epsilon(eps)?;
        match threat {
            ThreatModel::WhiteBox => {
                for &(model, m) in &evaluated {
                    let outcomes = attack_dataset(m, data, &cfg)?;
                    rows.push(AccuracyRow {
                        model: model.into(),
                        threat: name.into(),
                        epsilon: eps,
                        top1: adversarial_accuracy(m, &outcomes, data)?,
                    });
                }
            }
            ThreatModel::GrayBox | ThreatModel::BlackBox(_) => {
                let source: &dyn Classifier = match threat {
                    ThreatModel::BlackBox(surrogate) => surrogate,
                    _ => backbone,
                };
                let outcomes = attack_dataset(source, data, &cfg)?;
                for &(model, m) in &evaluated {
                    rows.push(AccuracyRow {
                        model: model.into(),
                        threat: name.into(),
                        epsilon: eps,
                        top1: adversarial_accuracy(m, &outcomes, data)?,
                    });
                }
            }
        }
    }
    let mut notes = Vec::new();
    if matches!(threat, ThreatModel::WhiteBox)
        && cache_model.is_some()
        && matches!(method, RetrievalMethod::Knn(_))
    {
        notes
            .push("white-box k-NN cache attacked through the continuous-cache gradient".to_owned());
    }
    Ok(AccuracyTable {
        rows,
        attack: *base,
        retrieval: method.to_string(),
        notes,
    })
}

/// Grid search for `theta` on gray-box adversarial validation accuracy: the
/// backbone is attacked once at `cfg.epsilon` and every grid value is scored
/// on the same adversarial inputs. Ties go to the smallest value.
pub fn tune_theta_gray_box(
    cache: &Cache,
    backbone: &Backbone,
    val: &Dataset,
    grid: &[f64],
    cfg: &AttackConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Parameter("validation set is empty".into()));
    }
    let outcomes = attack_dataset(backbone, val, cfg)?;
    crate::cache::select_theta(grid, |theta| {
        let c = cache.clone().with_theta(theta)?;
        let model = CacheModel::new(backbone, &c, RetrievalMethod::Continuous)?;
        adversarial_accuracy(&model, &outcomes, val)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(x: &[f64]) -> Result<Vec<f64>> {
        // Two classes; logit of class 1 grows with x[0].
        let z = 40.0 * (x[0] - 0.5);
        let p1 = 1.0 / (1.0 + (-z).exp());
        Ok(vec![1.0 - p1, p1])
    }

    fn linear_grad(_: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![-1.0, 0.0])
    }

    #[test]
    fn defaults() {
        let cfg = AttackConfig::new(0.06, 0).unwrap();
        assert_eq!(cfg.stepsize, 2.0 / 225.0);
        assert_eq!(cfg.iterations, 10);
        assert!(cfg.random_start);
        assert!(AttackConfig::new(0.0, 0).is_err());
        assert!(AttackConfig::new(1.5, 0).is_err());
    }

    #[test]
    fn linear_objective_reaches_upper_face() {
        let x = [0.49, 0.3];
        let mut cfg = AttackConfig::new(0.04, 3).unwrap();
        let r = 0.04 * 0.49;
        cfg.stepsize = 2.0 * r;
        let out = pgd_targeted(linear, linear_grad, &x, 1, &cfg).unwrap();
        assert!(out.success);
        assert!((out.x_adv[0] - (x[0] + r)).abs() < 1e-15);
        assert!((out.x_adv[1] - x[1]).abs() <= r + 1e-15);
    }

    #[test]
    fn failure_returns_clean_input() {
        let x = [0.2, 0.3];
        let cfg = AttackConfig::new(0.01, 3).unwrap();
        let out = pgd_targeted(linear, linear_grad, &x, 1, &cfg).unwrap();
        assert!(!out.success);
        assert_eq!(out.x_adv, x.to_vec());
    }

    #[test]
    fn non_finite_gradient_is_failure() {
        let x = [0.49, 0.3];
        let cfg = AttackConfig::new(0.5, 3).unwrap();
        let out = pgd_targeted(linear, |_| Ok(vec![f64::NAN, 0.0]), &x, 1, &cfg).unwrap();
        assert!(!out.success);
        assert_eq!(out.x_adv, x.to_vec());
    }

    #[test]
    fn zero_image_has_zero_radius() {
        let x = [0.0, 0.0];
        let cfg = AttackConfig::new(0.1, 3).unwrap();
        let out = pgd_targeted(linear, linear_grad, &x, 1, &cfg).unwrap();
        assert_eq!(out.x_adv, x.to_vec());
        let out = pgd_targeted(linear, linear_grad, &x, 0, &cfg).unwrap();
        assert!(out.success);
        assert_eq!(out.x_adv, x.to_vec());
    }

    #[test]
    fn projection_order_is_immaterial() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..10_000 {
            let x: f64 = rng.random();
            let r: f64 = rng.random_range(0.0..0.2);
            let v: f64 = rng.random_range(-0.5..1.5);
            let a = v.clamp(x - r, x + r).clamp(0.0, 1.0);
            let b = v.clamp(0.0, 1.0).clamp(x - r, x + r);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn targets() {
        for i in 0..100 {
            assert_eq!(target_selection(0, 2, 9, i).unwrap(), 1);
        }
        let mut seen = [0usize; 10];
        for i in 0..10_000 {
            let t = target_selection(3, 10, 9, i).unwrap();
            assert_ne!(t, 3);
            assert_eq!(t, target_selection(3, 10, 9, i).unwrap());
            seen[t] += 1;
        }
        assert!(seen.iter().enumerate().all(|(c, &n)| c == 3 || n > 900));
        assert!(target_selection(0, 1, 9, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let table = AccuracyTable {
            rows: vec![AccuracyRow {
                model: "cache".into(),
                threat: "gray".into(),
                epsilon: 0.06,
                top1: 0.5,
            }],
            attack: AttackConfig::new(0.06, 1).unwrap(),
            retrieval: "continuous".into(),
            notes: vec![],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "model,threat,epsilon,top1\ncache,gray,0.06,0.500000\n"
        );
        assert_eq!(table.get("cache", "gray", 0.06), Some(0.5));
    }
}
