//! Supervised training and checkpoint persistence.

pub mod adagrad;
pub mod checkpoint;
pub mod loss;
pub mod trainer;

pub use adagrad::{adagrad_step, AdaGrad};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use loss::{bce_loss, sigmoid};
pub use trainer::{accuracy, train, train_with_progress, EpochRecord, TrainConfig};
