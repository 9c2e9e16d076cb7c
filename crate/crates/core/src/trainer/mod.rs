//! Config-driven training: model assembly, synthetic data, optimizers,
//! checkpoints, and the gradient-check and Gauss benchmark drivers.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod run;

pub use config::{LayerConfig, OptimizerKind, Task, TrainConfig};
pub use data::{gen_synthetic, Dataset, DatasetSpec};
pub use model::{build_model, Sequential};
pub use optim::Optimizer;
pub use run::{metrics_csv, MetricsRow, Trainer, CSV_HEADER};
