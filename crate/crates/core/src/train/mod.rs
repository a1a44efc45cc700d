//! Training, evaluation and inference drivers.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod eval;
pub mod infer;
pub mod report;
pub mod stage;

pub use adam::{linear_lr, Adam};
pub use batch::{Augment, Batch, LoadedSplit};
pub use checkpoint::Checkpoint;
pub use eval::{evaluate, predict, EvalOptions, Padding, Prediction, Report};
pub use infer::{infer, InferOutputs};
pub use report::write_report;
pub use stage::{dataset_loss, restore_model, stage_checkpoint_path, train_stage1, train_stage2, TrainOptions, TrainOutcome};
