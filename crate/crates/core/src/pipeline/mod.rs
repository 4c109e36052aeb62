//! Training and evaluation pipeline: configuration, data, the cascade model,
//! checkpoints, metrics and the command implementations behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod train;

pub use checkpoint::{Checkpoint, TensorKind, TensorRecord};
pub use config::{EvalSplit, PoolGrad, RunConfig, Stage2Mode};
pub use dataset::{Dataset, DatasetManifest, SyntheticSpec};
pub use model::{Branch, Cascade, CascadePass, SetPass, TransformerSet};
pub use metrics::{parse_metrics, MetricsRow, MetricsWriter};
pub use train::{train, Stages, TrainReport};
pub use commands::{evaluate_cascade, evaluate_cmd, feature_bank, visualize_cmd};
