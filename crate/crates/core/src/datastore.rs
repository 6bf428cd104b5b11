//! Synthetic image datasets, embedding tables, and their file formats.
//!
//! Byte layouts (all little-endian, floats stored as f32):
//!
//! ```text
//! dataset    "EPDS" | version u32 | N u32 | W u32 | C u32 | split u8 | images [N*W*W] | labels u32 [N]
//! embeddings "EPEM" | version u32 | K u32 | d u32 | layer u8 | id_len u32 | id bytes | vectors [K*d] | labels u32 [K]
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EmbeddingLayerId};
use crate::codec::{self, Decoder, Encoder};
use crate::error::{check_len, Error, Result};
use crate::math::{self, Matrix};
use crate::stream_rng;

const DATASET_MAGIC: &[u8; 4] = b"EPDS";
const EMBEDDINGS_MAGIC: &[u8; 4] = b"EPEM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parameter(format!("unknown split `{s}`"))),
        }
    }
}

/// Square grayscale images in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<usize>,
    width: usize,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Matrix,
        labels: Vec<usize>,
        width: usize,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        check_len("dataset labels", images.rows(), labels.len())?;
        check_len("image size", width * width, images.cols())?;
        if images.rows() == 0 {
            return Err(Error::Parameter(
                "dataset must contain at least one image".into(),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Parameter(format!("label {y} >= {classes} classes")));
        }
        if !images.as_slice().iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("pixels must lie in [0, 1]".into()));
        }
        let mut images = images;
        math::quantize(images.as_mut_slice());
        Ok(Self {
            images,
            labels,
            width,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.width * self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &usize)> + '_ {
        self.images.iter_rows().zip(&self.labels)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            width: self.width,
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(DATASET_MAGIC, VERSION);
        e.usize32(self.len())?;
        e.usize32(self.width)?;
        e.usize32(self.classes)?;
        e.u8(self.split.tag());
        e.f32s(self.images.as_slice());
        e.u32s(&self.labels)?;
        Ok(e.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, DATASET_MAGIC, VERSION)?;
        let n = d.usize32()?;
        let w = d.usize32()?;
        let c = d.usize32()?;
        let split = Split::from_tag(d.u8()?).ok_or_else(|| d.malformed("unknown split tag"))?;
        let images = Matrix::from_vec(n, w * w, d.f32s(n * w * w)?)?;
        let labels = d.u32s(n)?;
        d.finish()?;
        Self::new(images, labels, w, c, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameters of the procedural shape-and-texture benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    pub width: usize,
    pub seed: u64,
    /// Train / val / test fractions.
    pub fractions: [f64; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 700,
            width: 16,
            seed: 2019,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Cross,
    HBars,
    Triangle,
    Ring,
    Square,
    Diamond,
    VBars,
    Saltire,
    Frame,
}

const SHAPES: [Shape; 10] = [
    Shape::Disk,
    Shape::Cross,
    Shape::HBars,
    Shape::Triangle,
    Shape::Ring,
    Shape::Square,
    Shape::Diamond,
    Shape::VBars,
    Shape::Saltire,
    Shape::Frame,
];

impl Shape {
    /// Membership test on centred coordinates in roughly `[-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            Shape::Disk => r <= 0.62,
            Shape::Cross => {
                (u.abs() <= 0.22 && v.abs() <= 0.75) || (v.abs() <= 0.22 && u.abs() <= 0.75)
            }
            Shape::HBars => {
                u.abs() <= 0.75 && v.abs() <= 0.75 && ((v + 0.75) / 0.3).floor() as i64 % 2 == 0
            }
            Shape::Triangle => (-0.7..=0.6).contains(&v) && u.abs() <= (v + 0.7) * 0.55,
            Shape::Ring => (0.42..=0.75).contains(&r),
            Shape::Square => u.abs() <= 0.4 && v.abs() <= 0.4,
            Shape::Diamond => u.abs() + v.abs() <= 0.72,
            Shape::VBars => {
                u.abs() <= 0.75 && v.abs() <= 0.75 && ((u + 0.75) / 0.3).floor() as i64 % 2 == 0
            }
            Shape::Saltire => {
                u.abs() <= 0.8 && v.abs() <= 0.8 && (u - v).abs() <= 0.28
                    || u.abs() <= 0.8 && v.abs() <= 0.8 && (u + v).abs() <= 0.28
            }
            Shape::Frame => {
                let m = u.abs().max(v.abs());
                (0.5..=0.78).contains(&m)
            }
        }
    }
}

/// Per-sample nuisance parameters; zero jitter gives the class prototype.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    shift_u: f64,
    shift_v: f64,
    scale: f64,
    orientation: f64,
    phase: f64,
    contrast: f64,
    background: f64,
    tilt_u: f64,
    tilt_v: f64,
}

impl Jitter {
    const NONE: Jitter = Jitter {
        shift_u: 0.0,
        shift_v: 0.0,
        scale: 1.0,
        orientation: 0.0,
        phase: 0.0,
        contrast: 1.0,
        background: 0.35,
        tilt_u: 0.0,
        tilt_v: 0.0,
    };

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Jitter {
            shift_u: rng.random_range(-0.5..=0.5),
            shift_v: rng.random_range(-0.5..=0.5),
            scale: rng.random_range(0.7..=1.3),
            orientation: rng.random_range(-0.05..=0.05),
            phase: rng.random_range(0.0..=0.3),
            contrast: rng.random_range(0.7..=1.0),
            background: rng.random_range(0.2..=0.5),
            tilt_u: rng.random_range(-0.1..=0.1),
            tilt_v: rng.random_range(-0.1..=0.1),
        }
    }
}

/// Brightness step between background and shape.
const SHAPE_CONTRAST: f64 = 0.22;
/// Amplitude of the class texture, which covers the whole image.
const TEXTURE_AMPLITUDE: f64 = 0.02;
const PIXEL_NOISE: f64 = 0.05;
const MIN_PROTOTYPE_DISTANCE: f64 = 1.0;

/// Renders one image for `class`: a bright shape on an unevenly lit
/// background, overlaid with a faint oriented sinusoidal texture. Shape and
/// texture are both class-specific; the texture is nearly jitter-free but
/// too faint to survive a small l∞ perturbation.
fn render(class: usize, classes: usize, width: usize, j: &Jitter) -> Vec<f64> {
    let shape = SHAPES[class % SHAPES.len()];
    let orientation = PI * class as f64 / classes as f64 + j.orientation;
    let freq = 1.5 + 0.75 * (class % 3) as f64;
    let (s, c) = orientation.sin_cos();
    let mut img = Vec::with_capacity(width * width);
    for row in 0..width {
        for col in 0..width {
            let x = 2.0 * (col as f64 + 0.5) / width as f64 - 1.0;
            let y = 2.0 * (row as f64 + 0.5) / width as f64 - 1.0;
            let u = (x - j.shift_u) / j.scale;
            let v = (y - j.shift_v) / j.scale;
            let t = (PI * freq * (x * c + y * s) + j.phase).sin();
            let mut px = j.background + j.tilt_u * x + j.tilt_v * y + TEXTURE_AMPLITUDE * t;
            if shape.contains(u, v) {
                px += j.contrast * SHAPE_CONTRAST;
            }
            img.push(px);
        }
    }
    img
}

/// Noise-free, jitter-free class templates.
pub fn prototypes(classes: usize, width: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..classes)
        .map(|c| render(c, classes, width, &Jitter::NONE))
        .collect();
    Matrix::from_rows(&rows).expect("prototype rows share a width")
}

fn split_counts(per_class: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = (per_class as f64 * fractions[0]).round() as usize;
    let val =
        ((per_class as f64 * fractions[1]).round() as usize).min(per_class - train.min(per_class));
    let train = train.min(per_class);
    [train, val, per_class - train - val]
}

/// Generates stratified, disjoint train/val/test splits.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, Dataset, Dataset)> {
    if cfg.classes < 2 {
        return Err(Error::Parameter("need at least 2 classes".into()));
    }
    if cfg.width < 8 {
        return Err(Error::Parameter("image width must be >= 8".into()));
    }
    if cfg.per_class == 0 {
        return Err(Error::Parameter("per_class must be >= 1".into()));
    }
    let sum: f64 = cfg.fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || cfg.fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Parameter(format!(
            "split fractions must be non-negative and sum to 1 (got {:?})",
            cfg.fractions
        )));
    }

    let protos = prototypes(cfg.classes, cfg.width);
    for a in 0..cfg.classes {
        for b in a + 1..cfg.classes {
            let d: f64 = protos
                .row(a)
                .iter()
                .zip(protos.row(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            if d <= MIN_PROTOTYPE_DISTANCE {
                return Err(Error::Config(format!(
                    "class prototypes {a} and {b} are only {d:.3} apart"
                )));
            }
        }
    }

    let counts = split_counts(cfg.per_class, cfg.fractions);
    let total = cfg.classes * cfg.per_class;
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let images: Vec<Vec<f64>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let class = idx % cfg.classes;
            let mut rng = stream_rng(cfg.seed, idx as u64);
            let jitter = Jitter::sample(&mut rng);
            let mut img = render(class, cfg.classes, cfg.width, &jitter);
            for p in &mut img {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            img
        })
        .collect();

    // Sample idx belongs to class idx % C; shuffle each class's members and
    // deal them into splits.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut members: [Vec<usize>; 3] = Default::default();
    for class in 0..cfg.classes {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..cfg.per_class)
            .map(|k| k * cfg.classes + class)
            .collect();
        idx.shuffle(&mut rng);
        let mut start = 0;
        for (s, &n) in counts.iter().enumerate() {
            members[s].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }

    let build = |idx: &mut Vec<usize>, split: Split| -> Result<Dataset> {
        idx.sort_unstable();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| images[i].as_slice()).collect();
        let mat = if rows.is_empty() {
            Matrix::zeros(0, cfg.width * cfg.width)
        } else {
            Matrix::from_rows(&rows)?
        };
        Dataset::new(
            mat,
            idx.iter().map(|&i| i % cfg.classes).collect(),
            cfg.width,
            cfg.classes,
            split,
        )
    };
    let [mut tr, mut va, mut te] = members;
    Ok((
        build(&mut tr, Split::Train)?,
        build(&mut va, Split::Val)?,
        build(&mut te, Split::Test)?,
    ))
}

/// Embedding vectors with their labels and the backbone they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub vectors: Matrix,
    pub labels: Vec<usize>,
    pub layer: EmbeddingLayerId,
    pub backbone_id: String,
}

impl LabeledEmbeddings {
    pub fn new(
        vectors: Matrix,
        labels: Vec<usize>,
        layer: EmbeddingLayerId,
        backbone_id: impl Into<String>,
    ) -> Result<Self> {
        check_len("embedding labels", vectors.rows(), labels.len())?;
        let backbone_id = backbone_id.into();
        if backbone_id.is_empty() {
            return Err(Error::Parameter("backbone id must be non-empty".into()));
        }
        let mut vectors = vectors;
        math::quantize(vectors.as_mut_slice());
        Ok(Self {
            vectors,
            labels,
            layer,
            backbone_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(EMBEDDINGS_MAGIC, VERSION);
        e.usize32(self.len())?;
        e.usize32(self.dim())?;
        e.u8(self.layer.tag());
        e.usize32(self.backbone_id.len())?;
        e.bytes(self.backbone_id.as_bytes());
        e.f32s(self.vectors.as_slice());
        e.u32s(&self.labels)?;
        Ok(e.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, EMBEDDINGS_MAGIC, VERSION)?;
        let k = d.usize32()?;
        let dim = d.usize32()?;
        let layer =
            EmbeddingLayerId::from_tag(d.u8()?).ok_or_else(|| d.malformed("unknown layer tag"))?;
        let id_len = d.usize32()?;
        let id = std::str::from_utf8(d.bytes(id_len)?)
            .map_err(|_| d.malformed("backbone id is not UTF-8"))?
            .to_owned();
        let vectors = Matrix::from_vec(k, dim, d.f32s(k * dim)?)?;
        let labels = d.u32s(k)?;
        d.finish()?;
        Self::new(vectors, labels, layer, id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Embeds every image of `data` at `layer`, in order.
pub fn extract_embeddings(
    backbone: &Backbone,
    data: &Dataset,
    layer: EmbeddingLayerId,
) -> Result<LabeledEmbeddings> {
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| backbone.embed(data.image(i), layer))
        .collect::<Result<_>>()?;
    let vectors = Matrix::from_rows(&rows)?;
    LabeledEmbeddings::new(vectors, data.labels().to_vec(), layer, backbone.digest())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            classes: 10,
            per_class: 100,
            width: 16,
            seed: 5,
            fractions: [0.8, 0.1, 0.1],
        }
    }

    #[test]
    fn split_sizes() {
        let (tr, va, te) = generate_dataset(&small()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        for d in [&tr, &va, &te] {
            let counts = d.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut cfg = small();
        cfg.fractions = [0.5, 0.2, 0.2];
        assert!(matches!(generate_dataset(&cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn prototypes_are_far_apart() {
        let p = prototypes(10, 16);
        for a in 0..10 {
            for b in a + 1..10 {
                let d = p
                    .row(a)
                    .iter()
                    .zip(p.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > MIN_PROTOTYPE_DISTANCE, "{a} {b} {d}");
            }
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
        assert!(a
            .0
            .images()
            .as_slice()
            .iter()
            .all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn dataset_round_trip_and_bad_magic() {
        let (_, va, _) = generate_dataset(&small()).unwrap();
        let bytes = va.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), va);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn embedding_file_size() {
        let (k, d) = (10_000, 64);
        let id = "abc123";
        let emb = LabeledEmbeddings::new(
            Matrix::zeros(k, d),
            vec![0; k],
            EmbeddingLayerId::HiddenRelu,
            id,
        )
        .unwrap();
        let header = 4 + 4 + 4 + 4 + 1 + 4 + id.len();
        let labels = k * 4;
        assert_eq!(emb.to_bytes().unwrap().len(), header + k * d * 4 + labels);
    }
}
