//! Benchmark recipes: the standard, augmentation-trained, reference and
//! surrogate backbones, trained with shared hyperparameters.

use serde::{Deserialize, Serialize};

use crate::backbone::{train, Backbone, EmbeddingLayerId, TrainConfig};
use crate::cache::{build_cache, Cache};
use crate::corruptions::CorruptionSuite;
use crate::datastore::{extract_embeddings, Dataset, GenConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub data: GenConfig,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            hidden: 72,
            epochs: 150,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 11,
        }
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 4 {
            return Err(Error::Config(format!(
                "hidden width must be at least 4 (the reference model uses a quarter), got {}",
                self.hidden
            )));
        }
        if self.epochs < 2 {
            return Err(Error::Config(format!(
                "epochs must be at least 2 (the reference model uses half), got {}",
                self.epochs
            )));
        }
        self.train_config(None).validate()
    }

    pub fn train_config(&self, augmentation: Option<CorruptionSuite>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            augmentation,
        }
    }

    fn fit(&self, train_set: &Dataset, hidden: usize, cfg: &TrainConfig) -> Result<Backbone> {
        let init = Backbone::init(train_set.input_dim(), hidden, train_set.classes(), cfg.seed)?;
        Ok(train(init, train_set, cfg)?.model)
    }

    /// Cross-entropy on clean images.
    pub fn standard(&self, train_set: &Dataset) -> Result<Backbone> {
        self.fit(train_set, self.hidden, &self.train_config(None))
    }

    /// Cross-entropy on images corrupted by `suite` half of the time.
    pub fn augmented(&self, train_set: &Dataset, suite: &CorruptionSuite) -> Result<Backbone> {
        self.fit(
            train_set,
            self.hidden,
            &self.train_config(Some(suite.clone())),
        )
    }

    /// The CE baseline: a quarter of the hidden width, half the epochs.
    pub fn reference(&self, train_set: &Dataset) -> Result<Backbone> {
        let cfg = TrainConfig {
            epochs: self.epochs / 2,
            seed: self.seed.wrapping_add(1),
            ..self.train_config(None)
        };
        self.fit(train_set, self.hidden / 4, &cfg)
    }

    /// Same architecture as the standard backbone, independent initialization
    /// and data order.
    pub fn surrogate(&self, train_set: &Dataset) -> Result<Backbone> {
        let cfg = TrainConfig {
            seed: self.seed.wrapping_add(2),
            ..self.train_config(None)
        };
        self.fit(train_set, self.hidden, &cfg)
    }
}

/// Cache over `train_set` embedded at `layer` of `backbone`.
pub fn cache_for(
    backbone: &Backbone,
    train_set: &Dataset,
    layer: EmbeddingLayerId,
    theta: f64,
) -> Result<Cache> {
    let emb = extract_embeddings(backbone, train_set, layer)?;
    build_cache(&emb, train_set.classes(), theta)
}
