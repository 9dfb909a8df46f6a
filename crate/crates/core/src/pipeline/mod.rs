//! Training and evaluation: synthetic data, loss, optimizer, metrics and
//! checkpoints.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{generate_shapes_dataset, Dataset, Sample, IGNORE_ID};
pub use loss::{topk_count, topk_cross_entropy};
pub use metrics::{mean_iou, ConfusionMatrix, IouReport};
pub use optim::{poly_lr, AdamW};
pub use train::{evaluate, run, EvalRecord, RunOutput, StepRecord, TrainConfig, TrainSummary, Trainer};
