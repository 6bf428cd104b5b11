//! Artifact layout under the output directory, with digest bookkeeping for
//! the provenance record each subcommand writes.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use epcache::{
    Backbone, Cache, Dataset, EmbeddingLayerId, LabeledEmbeddings, RetrievalMethod, Split,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Trained on clean images.
    Standard,
    /// Trained on images corrupted by the suite half of the time.
    Augmented,
    /// The smaller CE baseline.
    Reference,
    /// Independently trained twin used by black-box attacks.
    Surrogate,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Augmented => "augmented",
            Variant::Reference => "reference",
            Variant::Surrogate => "surrogate",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionKind {
    None,
    Kmeans,
    Pca,
}

/// Which cache artifact a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheId {
    pub variant: Variant,
    pub layer: EmbeddingLayerId,
    pub compression: CompressionKind,
}

impl CacheId {
    pub fn stem(&self) -> String {
        match self.compression {
            CompressionKind::None => format!("{}-{}", self.variant, self.layer),
            CompressionKind::Kmeans => format!("{}-{}-kmeans", self.variant, self.layer),
            CompressionKind::Pca => format!("{}-{}-pca", self.variant, self.layer),
        }
    }

    /// Report tag: the cache stem plus the retrieval method when it is not
    /// the continuous default.
    pub fn tag(&self, method: RetrievalMethod) -> String {
        match method {
            RetrievalMethod::Continuous => self.stem(),
            RetrievalMethod::Knn(k) => format!("{}-knn{k}", self.stem()),
        }
    }

    fn producer(&self) -> String {
        match self.compression {
            CompressionKind::None => format!(
                "build-cache --variant {} --layer {}",
                self.variant, self.layer
            ),
            CompressionKind::Kmeans | CompressionKind::Pca => format!(
                "compress --variant {} --layer {} --method {}",
                self.variant,
                self.layer,
                if self.compression == CompressionKind::Kmeans {
                    "kmeans"
                } else {
                    "pca"
                }
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Selected θ for a cache, written next to it by `tune-theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaChoice {
    pub theta: f64,
    pub objective: String,
    pub grid: Vec<f64>,
}

pub struct Workspace {
    root: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Reads `rel`, recording its digest; a missing file names `producer`.
    pub fn read(&mut self, rel: &str, producer: &str) -> Result<Vec<u8>, CliError> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::missing(&path, producer));
        }
        let bytes = std::fs::read(&path)?;
        self.inputs.push(FileDigest {
            path: rel.to_owned(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.push(FileDigest {
            path: rel.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn dataset(&mut self, split: Split) -> Result<Dataset, CliError> {
        let bytes = self.read(&format!("data/{split}.epds"), "gen-data")?;
        Ok(Dataset::from_bytes(&bytes)?)
    }

    pub fn backbone(&mut self, variant: Variant) -> Result<Backbone, CliError> {
        let producer = format!("train-backbone --variant {variant}");
        let bytes = self.read(&format!("backbones/{variant}.epbb"), &producer)?;
        Ok(Backbone::from_bytes(&bytes)?)
    }

    pub fn embeddings(
        &mut self,
        variant: Variant,
        layer: EmbeddingLayerId,
        split: Split,
    ) -> Result<LabeledEmbeddings, CliError> {
        let producer = format!("extract --variant {variant} --layer {layer} --split {split}");
        let bytes = self.read(
            &format!("embeddings/{variant}-{layer}-{split}.epem"),
            &producer,
        )?;
        Ok(LabeledEmbeddings::from_bytes(&bytes)?)
    }

    pub fn cache_path(id: &CacheId) -> String {
        format!("caches/{}.epch", id.stem())
    }

    pub fn theta_path(id: &CacheId) -> String {
        format!("caches/{}.theta.json", id.stem())
    }

    /// The cache as built; θ is not adjusted.
    pub fn raw_cache(&mut self, id: &CacheId) -> Result<Cache, CliError> {
        let bytes = self.read(&Self::cache_path(id), &id.producer())?;
        Ok(Cache::from_bytes(&bytes)?)
    }

    /// The cache with θ from `tune-theta` applied when it has been run.
    pub fn cache(&mut self, id: &CacheId) -> Result<Cache, CliError> {
        let cache = self.raw_cache(id)?;
        let rel = Self::theta_path(id);
        if !self.exists(&rel) {
            return Ok(cache);
        }
        let choice: ThetaChoice = serde_json::from_slice(&self.read(&rel, "tune-theta")?)?;
        Ok(cache.with_theta(choice.theta)?)
    }

    pub fn report<T: for<'de> Deserialize<'de>>(
        &mut self,
        rel: &str,
        producer: &str,
    ) -> Result<T, CliError> {
        Ok(serde_json::from_slice(&self.read(rel, producer)?)?)
    }

    /// Writes `provenance/<name>.json` listing every input and output read
    /// or written so far.
    pub fn finish<A: Serialize, C: Serialize>(
        mut self,
        name: &str,
        arguments: &A,
        config: &C,
    ) -> Result<Vec<FileDigest>, CliError> {
        #[derive(Serialize)]
        struct Provenance<'a, A, C> {
            tool: &'static str,
            version: &'static str,
            arguments: &'a A,
            config: &'a C,
            inputs: &'a [FileDigest],
            outputs: &'a [FileDigest],
        }
        let outputs = std::mem::take(&mut self.outputs);
        let inputs = std::mem::take(&mut self.inputs);
        let record = Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            arguments,
            config,
            inputs: &inputs,
            outputs: &outputs,
        };
        let rel = format!("provenance/{name}.json");
        self.write_json(&rel, &record)?;
        Ok(outputs)
    }
}
