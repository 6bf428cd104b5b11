//! Parametric image corruptions at five severities, and corruption-error
//! accounting against a reference classifier.
//!
//! `CE_c = mean_s(E_model[c, s]) / mean_s(E_reference[c, s])` and `mCE` is the
//! mean of `CE_c` over corruptions. Note the ratio of means, not the mean of
//! per-severity ratios.
//!
//! Suite config format (one directive or corruption per line, `#` comments):
//!
//! ```text
//! version 1
//! seed 7
//! gaussian_noise noise 0.04 0.08 0.12 0.18 0.26
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::Dataset;
use crate::error::{check_len, Error, Result};
use crate::eval::Classifier;
use crate::math::Matrix;
use crate::stream_rng;

pub const SEVERITIES: usize = 5;
const SUITE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Noise,
    Blur,
    Weather,
    Digital,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Noise,
        Category::Blur,
        Category::Weather,
        Category::Digital,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Noise => "noise",
            Category::Blur => "blur",
            Category::Weather => "weather",
            Category::Digital => "digital",
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorruptionKind {
    /// Additive N(0, σ²) noise; parameter σ.
    GaussianNoise,
    /// Salt-and-pepper; parameter is the fraction of pixels hit.
    ImpulseNoise,
    /// Mean over a (2r+1)² window; parameter r.
    BoxBlur,
    /// Mean over a horizontal run of L pixels; parameter L.
    MotionBlurHorizontal,
    /// Additive offset.
    BrightnessShift,
    /// Scale about the image mean; smaller is stronger.
    ContrastScale,
    /// Block-average with side B.
    Pixelate,
    /// Uniform quantization to L levels; fewer is stronger.
    Quantize,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::MotionBlurHorizontal,
        CorruptionKind::BrightnessShift,
        CorruptionKind::ContrastScale,
        CorruptionKind::Pixelate,
        CorruptionKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::MotionBlurHorizontal => "motion_blur_horizontal",
            CorruptionKind::BrightnessShift => "brightness_shift",
            CorruptionKind::ContrastScale => "contrast_scale",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Quantize => "quantize",
        }
    }

    /// Whether a larger parameter means a stronger corruption.
    fn increasing(self) -> bool {
        !matches!(
            self,
            CorruptionKind::ContrastScale | CorruptionKind::Quantize
        )
    }

    fn default_category(self) -> Category {
        match self {
            CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise => Category::Noise,
            CorruptionKind::BoxBlur | CorruptionKind::MotionBlurHorizontal => Category::Blur,
            CorruptionKind::BrightnessShift => Category::Weather,
            CorruptionKind::ContrastScale | CorruptionKind::Pixelate | CorruptionKind::Quantize => {
                Category::Digital
            }
        }
    }

    fn default_schedule(self) -> [f64; SEVERITIES] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            CorruptionKind::BoxBlur => [1.0, 2.0, 3.0, 4.0, 5.0],
            CorruptionKind::MotionBlurHorizontal => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::BrightnessShift => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::ContrastScale => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
            CorruptionKind::Quantize => [16.0, 8.0, 6.0, 4.0, 2.0],
        }
    }

    /// Applies this corruption with parameter `param` to a `width × width`
    /// image. Output is clipped to `[0, 1]`.
    pub fn apply(self, image: &[f64], width: usize, param: f64, seed: u64) -> Result<Vec<f64>> {
        check_len("corruption input", width * width, image.len())?;
        let mut rng = stream_rng(seed, 0);
        let mut out = match self {
            CorruptionKind::GaussianNoise => image
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + param * z
                })
                .collect(),
            CorruptionKind::ImpulseNoise => image
                .iter()
                .map(|&p| {
                    if rng.random_bool(param.clamp(0.0, 1.0)) {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        p
                    }
                })
                .collect(),
            CorruptionKind::BoxBlur => {
                let r = param.round().max(0.0) as isize;
                window_mean(image, width, r, r)
            }
            CorruptionKind::MotionBlurHorizontal => {
                let len = param.round().max(1.0) as isize;
                let left = (len - 1) / 2;
                let right = len - 1 - left;
                let w = width as isize;
                let mut out = Vec::with_capacity(image.len());
                for row in 0..w {
                    for col in 0..w {
                        let (lo, hi) = ((col - left).max(0), (col + right).min(w - 1));
                        let s: f64 = (lo..=hi).map(|c| image[(row * w + c) as usize]).sum();
                        out.push(s / (hi - lo + 1) as f64);
                    }
                }
                out
            }
            CorruptionKind::BrightnessShift => image.iter().map(|&p| p + param).collect(),
            CorruptionKind::ContrastScale => {
                let mean = image.iter().sum::<f64>() / image.len() as f64;
                image.iter().map(|&p| mean + param * (p - mean)).collect()
            }
            CorruptionKind::Pixelate => {
                let b = (param.round().max(1.0) as usize).min(width);
                let mut out = vec![0.0; image.len()];
                for by in (0..width).step_by(b) {
                    for bx in (0..width).step_by(b) {
                        let (ys, xs) = (by..(by + b).min(width), bx..(bx + b).min(width));
                        let cells = ys.len() * xs.len();
                        let mean = ys
                            .clone()
                            .flat_map(|y| xs.clone().map(move |x| image[y * width + x]))
                            .sum::<f64>()
                            / cells as f64;
                        for y in ys {
                            for x in xs.clone() {
                                out[y * width + x] = mean;
                            }
                        }
                    }
                }
                out
            }
            CorruptionKind::Quantize => {
                let levels = param.round().max(2.0) - 1.0;
                image
                    .iter()
                    .map(|&p| (p * levels).round() / levels)
                    .collect()
            }
        };
        for p in &mut out {
            *p = p.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

fn window_mean(image: &[f64], width: usize, ry: isize, rx: isize) -> Vec<f64> {
    let w = width as isize;
    let mut out = Vec::with_capacity(image.len());
    for row in 0..w {
        for col in 0..w {
            let (y0, y1) = ((row - ry).max(0), (row + ry).min(w - 1));
            let (x0, x1) = ((col - rx).max(0), (col + rx).min(w - 1));
            let mut s = 0.0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    s += image[(y * w + x) as usize];
                }
            }
            out.push(s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
        }
    }
    out
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub category: Category,
    /// Parameter for severities 1..=5.
    pub schedule: [f64; SEVERITIES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSuite {
    pub corruptions: Vec<Corruption>,
    pub seed: u64,
}

impl Default for CorruptionSuite {
    fn default() -> Self {
        Self {
            corruptions: CorruptionKind::ALL
                .into_iter()
                .map(|kind| Corruption {
                    kind,
                    category: kind.default_category(),
                    schedule: kind.default_schedule(),
                })
                .collect(),
            seed: 7,
        }
    }
}

impl CorruptionSuite {
    pub fn new(corruptions: Vec<Corruption>, seed: u64) -> Result<Self> {
        let suite = Self { corruptions, seed };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.corruptions {
            let s = &c.schedule;
            let monotone = s.windows(2).all(|w| {
                if c.kind.increasing() {
                    w[1] > w[0]
                } else {
                    w[1] < w[0]
                }
            });
            if !monotone {
                return Err(Error::Config(format!(
                    "severity schedule of `{}` is not strictly monotone in intensity",
                    c.kind
                )));
            }
        }
        for cat in Category::ALL {
            if !self.corruptions.iter().any(|c| c.category == cat) {
                return Err(Error::Config(format!(
                    "suite has no `{}` corruption",
                    cat.name()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.corruptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corruptions.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.corruptions.iter().map(|c| c.kind.name()).collect()
    }

    fn check_severity(severity: u8) -> Result<usize> {
        if !(1..=SEVERITIES as u8).contains(&severity) {
            return Err(Error::Parameter(format!(
                "severity {severity} not in 1..=5"
            )));
        }
        Ok(severity as usize - 1)
    }

    /// Applies suite member `index` at `severity` (1..=5).
    pub fn apply_index(
        &self,
        index: usize,
        image: &[f64],
        width: usize,
        severity: u8,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let s = Self::check_severity(severity)?;
        let c = self
            .corruptions
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("no corruption at index {index}")))?;
        c.kind.apply(image, width, c.schedule[s], seed)
    }

    /// Applies the corruption called `name` at `severity` (1..=5).
    pub fn apply(
        &self,
        name: &str,
        image: &[f64],
        width: usize,
        severity: u8,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let index = self
            .corruptions
            .iter()
            .position(|c| c.kind.name() == name)
            .ok_or_else(|| Error::UnknownCorruption(name.to_owned()))?;
        self.apply_index(index, image, width, severity, seed)
    }

    /// Seed for corrupting sample `sample` with member `index` at `severity`.
    fn cell_seed(&self, index: usize, severity: usize, sample: usize) -> u64 {
        let mut rng = stream_rng(
            self.seed,
            ((index as u64) << 40) | ((severity as u64) << 32) | sample as u64,
        );
        rng.random()
    }

    /// All of `data` corrupted by member `index` at `severity`.
    pub fn corrupt_dataset(
        &self,
        index: usize,
        severity: u8,
        data: &Dataset,
    ) -> Result<Vec<Vec<f64>>> {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let seed = self.cell_seed(index, severity as usize, i);
                self.apply_index(index, data.image(i), data.width(), severity, seed)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("version {SUITE_VERSION}\nseed {}\n", self.seed);
        for c in &self.corruptions {
            s.push_str(c.kind.name());
            s.push(' ');
            s.push_str(c.category.name());
            for p in c.schedule {
                s.push_str(&format!(" {p}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut seed = None;
        let mut corruptions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("suite line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "version" | "seed" if fields.len() != 2 => {
                    return Err(err(format!("`{}` takes one value", fields[0])))
                }
                "version" => {
                    let v: u32 = fields[1].parse().map_err(|_| err("bad version".into()))?;
                    if v != SUITE_VERSION {
                        return Err(Error::UnsupportedVersion {
                            found: v,
                            supported: SUITE_VERSION,
                        });
                    }
                    version = Some(v);
                }
                "seed" => seed = Some(fields[1].parse().map_err(|_| err("bad seed".into()))?),
                name => {
                    if fields.len() != 2 + SEVERITIES {
                        return Err(err(format!(
                            "expected `name category p1 .. p5`, got {} fields",
                            fields.len()
                        )));
                    }
                    let kind: CorruptionKind = name.parse()?;
                    let category: Category = fields[1].parse()?;
                    let mut schedule = [0.0; SEVERITIES];
                    for (slot, f) in schedule.iter_mut().zip(&fields[2..]) {
                        *slot = f.parse().map_err(|_| err(format!("bad parameter `{f}`")))?;
                    }
                    corruptions.push(Corruption {
                        kind,
                        category,
                        schedule,
                    });
                }
            }
        }
        if version.is_none() {
            return Err(Error::Config("suite is missing a `version` line".into()));
        }
        let seed = seed.ok_or_else(|| Error::Config("suite is missing a `seed` line".into()))?;
        Self::new(corruptions, seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::codec::write_file(path.as_ref(), self.to_text().as_bytes())
    }
}

/// Ratio of the mean model error to the mean reference error.
pub fn compute_ce(model_errors: &[f64], reference_errors: &[f64]) -> Result<f64> {
    check_len("CE severities", SEVERITIES, model_errors.len())?;
    check_len("CE severities", SEVERITIES, reference_errors.len())?;
    if model_errors
        .iter()
        .chain(reference_errors)
        .any(|e| !(0.0..=1.0).contains(e))
    {
        return Err(Error::Parameter("error rates must lie in [0, 1]".into()));
    }
    let reference: f64 = reference_errors.iter().sum::<f64>() / SEVERITIES as f64;
    if reference == 0.0 {
        return Err(Error::UndefinedCe {
            corruption: String::new(),
        });
    }
    let model: f64 = model_errors.iter().sum::<f64>() / SEVERITIES as f64;
    Ok(model / reference)
}

/// Top-1 error of every model on every (corruption, severity) cell. All
/// models see the same corrupted images.
pub fn corruption_errors(
    models: &[&dyn Classifier],
    suite: &CorruptionSuite,
    data: &Dataset,
) -> Result<Vec<Matrix>> {
    if data.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let mut tables = vec![Matrix::zeros(suite.len(), SEVERITIES); models.len()];
    for ci in 0..suite.len() {
        for s in 0..SEVERITIES {
            let images = suite.corrupt_dataset(ci, s as u8 + 1, data)?;
            for (table, model) in tables.iter_mut().zip(models) {
                let acc = crate::eval::accuracy_on(*model, &images, data.labels())?;
                table.set(ci, s, 1.0 - acc);
            }
        }
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeEntry {
    pub corruption: String,
    pub category: Category,
    pub ce: f64,
    pub model_mean_error: f64,
    pub reference_mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub ce_per_corruption: Vec<CeEntry>,
    pub mce: f64,
    /// corruptions × severities
    pub model_errors: Matrix,
    pub reference_errors: Matrix,
}

impl RobustnessReport {
    pub fn from_errors(
        suite: &CorruptionSuite,
        model_errors: Matrix,
        reference_errors: Matrix,
    ) -> Result<Self> {
        check_len("report rows", suite.len(), model_errors.rows())?;
        check_len("report rows", suite.len(), reference_errors.rows())?;
        let mut entries = Vec::with_capacity(suite.len());
        for (i, c) in suite.corruptions.iter().enumerate() {
            let ce =
                compute_ce(model_errors.row(i), reference_errors.row(i)).map_err(|e| match e {
                    Error::UndefinedCe { .. } => Error::UndefinedCe {
                        corruption: c.kind.name().to_owned(),
                    },
                    other => other,
                })?;
            entries.push(CeEntry {
                corruption: c.kind.name().to_owned(),
                category: c.category,
                ce,
                model_mean_error: model_errors.row(i).iter().sum::<f64>() / SEVERITIES as f64,
                reference_mean_error: reference_errors.row(i).iter().sum::<f64>()
                    / SEVERITIES as f64,
            });
        }
        let mce = entries.iter().map(|e| e.ce).sum::<f64>() / entries.len() as f64;
        Ok(Self {
            ce_per_corruption: entries,
            mce,
            model_errors,
            reference_errors,
        })
    }

    pub fn ce(&self, name: &str) -> Option<f64> {
        self.ce_per_corruption
            .iter()
            .find(|e| e.corruption == name)
            .map(|e| e.ce)
    }

    /// One row per corruption plus a trailing `mCE` row.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "corruption",
            "category",
            "ce",
            "model_mean_error",
            "reference_mean_error",
        ])?;
        for e in &self.ce_per_corruption {
            wtr.write_record([
                e.corruption.clone(),
                e.category.name().to_owned(),
                format!("{:.6}", e.ce),
                format!("{:.6}", e.model_mean_error),
                format!("{:.6}", e.reference_mean_error),
            ])?;
        }
        wtr.write_record(["mCE", "", &format!("{:.6}", self.mce), "", ""])?;
        wtr.flush()?;
        Ok(())
    }
}

/// CE per corruption and mCE of `model` relative to `reference`.
pub fn evaluate_corruption_robustness(
    model: &dyn Classifier,
    reference: &dyn Classifier,
    suite: &CorruptionSuite,
    data: &Dataset,
) -> Result<RobustnessReport> {
    let mut tables = corruption_errors(&[model, reference], suite, data)?;
    let reference_errors = tables.pop().unwrap();
    let model_errors = tables.pop().unwrap();
    RobustnessReport::from_errors(suite, model_errors, reference_errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::linf_dist;

    fn ramp(width: usize) -> Vec<f64> {
        (0..width * width)
            .map(|i| (i as f64 / (width * width) as f64) * 0.8 + 0.1)
            .collect()
    }

    #[test]
    fn default_suite_is_valid() {
        let s = CorruptionSuite::default();
        s.validate().unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.corruptions[0].schedule, [0.04, 0.08, 0.12, 0.18, 0.26]);
    }

    #[test]
    fn identity_contrast() {
        let img = ramp(8);
        let out = CorruptionKind::ContrastScale
            .apply(&img, 8, 1.0, 0)
            .unwrap();
        assert!(linf_dist(&out, &img) < 1e-15);
    }

    #[test]
    fn full_pixelate_is_constant_mean() {
        let img = ramp(8);
        let mean = img.iter().sum::<f64>() / 64.0;
        let out = CorruptionKind::Pixelate.apply(&img, 8, 8.0, 0).unwrap();
        assert!(out.iter().all(|p| (p - mean).abs() < 1e-12));
    }

    #[test]
    fn weakest_severity_changes_image_and_clips() {
        let s = CorruptionSuite::default();
        let img = ramp(16);
        for name in s.names() {
            let out = s.apply(name, &img, 16, 1, 3).unwrap();
            assert!(linf_dist(&out, &img) > 0.0, "{name}");
            assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(out, s.apply(name, &img, 16, 1, 3).unwrap());
        }
        assert!(matches!(
            s.apply("fog", &img, 16, 1, 0),
            Err(Error::UnknownCorruption(_))
        ));
        assert!(s.apply("pixelate", &img, 16, 6, 0).is_err());
    }

    #[test]
    fn ce_is_ratio_of_means() {
        assert_eq!(compute_ce(&[0.2; 5], &[0.4; 5]).unwrap(), 0.5);
        let same = [0.1, 0.3, 0.5, 0.6, 0.9];
        assert_eq!(compute_ce(&same, &same).unwrap(), 1.0);
        // mean of ratios would give (0.5 + 1 + 1 + 1 + 1) / 5 = 0.9
        let ce = compute_ce(&[0.1, 0.5, 0.5, 0.5, 0.5], &[0.2, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((ce - 2.1 / 2.2).abs() < 1e-15);
        assert!(matches!(
            compute_ce(&[0.1; 5], &[0.0; 5]),
            Err(Error::UndefinedCe { .. })
        ));
    }

    #[test]
    fn suite_text_round_trip() {
        let s = CorruptionSuite::default();
        assert_eq!(CorruptionSuite::parse(&s.to_text()).unwrap(), s);
        let bad = s.to_text().replace("0.08", "0.02");
        assert!(CorruptionSuite::parse(&bad).is_err());
        let no_weather = s
            .to_text()
            .replace("brightness_shift weather", "brightness_shift noise");
        assert!(CorruptionSuite::parse(&no_weather).is_err());
        assert!(matches!(
            CorruptionSuite::parse(&s.to_text().replace("version 1", "version 2")),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn report_mce_is_mean_ce() {
        let suite = CorruptionSuite::default();
        let mut m = Matrix::zeros(8, 5);
        let mut r = Matrix::zeros(8, 5);
        for i in 0..8 {
            for s in 0..5 {
                m.set(i, s, 0.05 * (i + s) as f64 / 2.0);
                r.set(i, s, 0.1 + 0.05 * s as f64);
            }
        }
        let rep = RobustnessReport::from_errors(&suite, m, r).unwrap();
        let mean = rep.ce_per_corruption.iter().map(|e| e.ce).sum::<f64>() / 8.0;
        assert!((rep.mce - mean).abs() < 1e-12);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.lines().last().unwrap().starts_with("mCE,"));
    }
}
