//! Experiment driver: configuration, the warm-started backbone, the training
//! loop, metrics, checkpoints and prefix probes.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod probe;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Method, TrainConfig};
pub use metrics::{compute_effectiveness, EffectivenessReport, LogEntry, MetricsRecord, Summary};
pub use train::{split_dataset, StepOutput, Trainer, TrainerState};
