//! Pre-training and PEFT fine-tuning loops, optimizers, and segmentation
//! metrics.

mod config;
mod metrics;
mod optim;
mod run;

pub use config::{OptimizerKind, Schedule, TrainConfig};
pub use metrics::{ConfusionMatrix, Metrics};
pub use optim::Optimizer;
pub use run::{
    evaluate, finetune, init_backbone, pretrain, train_epochs, verify_freeze, EpochRecord, FinetuneOutput, RunRecord,
    Subset,
};
