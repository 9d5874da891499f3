//! Training and evaluation driver.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;
pub mod viz;

pub use checkpoint::{read_header, Checkpoint, CheckpointHeader, CheckpointKind};
pub use config::{AblationFlags, DataConfig, ModelConfig, Precision, RunConfig, Scale, TrainConfig, LONG_TAIL};
pub use metrics::{ConfusionMatrix, Metrics};
pub use model::{argmax_labels, ForwardOutput, Model, ModelPlan};
pub use optim::{AdamHyper, AdamW};
pub use train::{
    checkpoint_path, count_fusion_work, evaluate, evaluate_split, generate_dataset, predict, profile_fusion, read_metrics, train, Dataset, EpochRecord, FusionProfile,
    Sequence, TrainOutcome, TrainReport, METRICS_FILE,
};
pub use gradcheck::{run_gradcheck, CheckResult, GradcheckOptions, GradcheckReport};

#[cfg(test)]
mod tests;
