//! Datasets, splits and dataset-level metrics.

mod dataset;
mod metrics;
pub mod pnm;
mod synth;

pub use dataset::{parse_manifest, split_train_holdout, Dataset, Source, SplitDataset};
pub use metrics::{channel_stddev, classifier_score, gap_from_losses, ChannelStats, ClassifierConfig, GapReport, ScoreClassifier};
pub use pnm::load_image_folder;
pub use synth::{synth_gaussian_ring, synth_patterns, GaussianRingConfig, PatternConfig, PATTERN_CLASSES};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("splits overlap: {0}")]
    Overlap(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}
