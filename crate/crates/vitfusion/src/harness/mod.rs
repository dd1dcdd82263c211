//! Training and evaluation orchestration: the step loop, configuration,
//! metrics, checkpoints, and heatmap emission.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod heatmap;
pub mod metrics;
pub mod train;

pub use config::{RngSet, RunConfig};
pub use eval::{evaluate, evaluate_policy, evaluate_random, evaluate_scripted, EvalStats};
pub use heatmap::HeatmapMethod;
pub use metrics::{read_metrics, MetricsWriter};
pub use train::{OpEvent, OpKind, Trainer};
