//! Optimizers, learning-rate schedule, checkpoints and the training loop.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use optim::{center_step, Adam, AdamConfig};
pub use schedule::lr_at;
pub use trainer::{fit, Dataset, EpochRecord, EvalSummary, FitSummary, StepReport, Trainer};
