//! Experiment configuration: a TOML file whose values flags may override.

use std::path::{Path, PathBuf};

use epcache::attacks::{DEFAULT_ITERATIONS, DEFAULT_STEPSIZE};
use epcache::pipeline::Recipe;
use epcache::{
    default_theta_grid, AttackConfig, CorruptionSuite, EmbeddingLayerId, GenConfig,
    RetrievalMethod, DEFAULT_EPSILONS, DEFAULT_THETA,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the output directory when neither the flag
/// nor the config sets one.
pub const OUT_DIR_ENV: &str = "EPCACHE_OUT";
const FALLBACK_OUT_DIR: &str = "epcache-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed for training and attacks. Required.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub cache: CacheSection,
    pub compression: CompressionSection,
    pub attack: AttackSection,
    pub corruptions: CorruptionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub per_class: usize,
    pub width: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            classes: g.classes,
            per_class: g.per_class,
            width: g.width,
            seed: g.seed,
            fractions: g.fractions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let r = Recipe::default();
        Self {
            hidden: r.hidden,
            epochs: r.epochs,
            learning_rate: r.learning_rate,
            batch_size: r.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    /// `hidden` or `probs`.
    pub layer: String,
    pub theta: f64,
    pub grid: Vec<f64>,
    /// `continuous` or `<k>-nn`.
    pub retrieval: String,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            layer: "hidden".into(),
            theta: DEFAULT_THETA,
            grid: default_theta_grid(),
            retrieval: "continuous".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionSection {
    /// Number of k-means centroids as a fraction of the cache size.
    pub kmeans_fraction: f64,
    /// Number of PCA dimensions as a fraction of the key dimension.
    pub pca_fraction: f64,
    pub per_class: bool,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for CompressionSection {
    fn default() -> Self {
        Self {
            kmeans_fraction: 0.125,
            pca_fraction: 0.125,
            per_class: true,
            iterations: 100,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub stepsize: f64,
    pub iterations: usize,
    pub random_start: bool,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilons: DEFAULT_EPSILONS.to_vec(),
            stepsize: DEFAULT_STEPSIZE,
            iterations: DEFAULT_ITERATIONS,
            random_start: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    /// Suite text file; the built-in suite when absent. Relative paths are
    /// resolved against the config file's directory.
    pub suite: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        if let Some(suite) = &cfg.corruptions.suite {
            if suite.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.corruptions.suite = Some(base.join(suite));
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| {
            CliError::config("no seed: set `seed` in the config or pass --seed".into())
        })
    }

    /// Flag, then config, then environment, then `epcache-out`.
    pub fn resolve_out_dir(&mut self, flag: Option<PathBuf>) {
        let dir = flag
            .or_else(|| self.out_dir.take())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR));
        self.out_dir = Some(dir);
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir
            .as_deref()
            .unwrap_or(Path::new(FALLBACK_OUT_DIR))
    }

    pub fn recipe(&self) -> Result<Recipe, CliError> {
        let d = &self.data;
        let recipe = Recipe {
            data: GenConfig {
                classes: d.classes,
                per_class: d.per_class,
                width: d.width,
                seed: d.seed,
                fractions: d.fractions,
            },
            hidden: self.backbone.hidden,
            epochs: self.backbone.epochs,
            learning_rate: self.backbone.learning_rate,
            batch_size: self.backbone.batch_size,
            seed: self.seed()?,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn layer(&self) -> Result<EmbeddingLayerId, CliError> {
        Ok(self.cache.layer.parse()?)
    }

    pub fn retrieval(&self) -> Result<RetrievalMethod, CliError> {
        Ok(self.cache.retrieval.parse()?)
    }

    pub fn attack(&self, epsilon: f64) -> Result<AttackConfig, CliError> {
        let a = &self.attack;
        let cfg = AttackConfig {
            epsilon,
            stepsize: a.stepsize,
            iterations: a.iterations,
            random_start: a.random_start,
            seed: match a.seed {
                Some(s) => s,
                None => self.seed()?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn suite(&self) -> Result<CorruptionSuite, CliError> {
        let suite = match &self.corruptions.suite {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::config(format!(
                        "corruption suite {} does not exist",
                        path.display()
                    )));
                }
                CorruptionSuite::load(path)?
            }
            None => CorruptionSuite::default(),
        };
        suite.validate()?;
        Ok(suite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_recipe_defaults_but_no_seed() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert!(cfg.seed().is_err());
        assert_eq!(cfg.backbone, BackboneSection::default());
        assert_eq!(cfg.cache.grid, default_theta_grid());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("seed = 1\n[cache]\nthetta = 3\n").is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("seed = 4\n[backbone]\nhidden = 16\n[attack]\nepsilons = [0.06]\n")
                .unwrap();
        let recipe = cfg.recipe().unwrap();
        assert_eq!((recipe.hidden, recipe.seed), (16, 4));
        assert_eq!(cfg.attack(0.06).unwrap().seed, 4);
        assert_eq!(cfg.attack.epsilons, vec![0.06]);
    }
}
