//! Episodic-memory image classification.
//!
//! A small differentiable backbone embeds images; a cache of unit-norm
//! training embeddings (keys) and their labels (values) classifies a query by
//! a similarity-weighted average of values. Around that core sit cache
//! compression (PCA, mini-batch k-means), targeted PGD attacks under
//! white-, gray- and black-box threat models, and a corruption suite with
//! CE / mCE accounting.

// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod backbone;
pub mod cache;
mod codec;
pub mod compression;
pub mod corruptions;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod math;
pub mod pipeline;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attacks::{
    pgd_targeted, run_threat_scenario, target_selection, AccuracyRow, AccuracyTable, AttackConfig,
    AttackOutcome, ThreatModel, DEFAULT_EPSILONS,
};
pub use backbone::{train, Backbone, EmbeddingLayerId, LossSpec, TrainConfig, TrainOutcome};
pub use cache::{
    build_cache, default_theta_grid, normalize_query, tune_theta, Cache, CacheModel,
    RetrievalMethod, DEFAULT_THETA,
};
pub use compression::{
    compress_cache, fit_pca, minibatch_kmeans, Compression, KMeansConfig, PcaTransform,
};
pub use corruptions::{
    compute_ce, evaluate_corruption_robustness, Category, CorruptionKind, CorruptionSuite,
    RobustnessReport,
};
pub use datastore::{
    extract_embeddings, generate_dataset, Dataset, GenConfig, LabeledEmbeddings, Split,
};
pub use error::{Error, Result};
pub use eval::Classifier;
pub use math::Matrix;

/// Independent deterministic random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
