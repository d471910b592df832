//! Training and evaluation protocol: Adam with step decay over cross-entropy,
//! Top-K accuracy, confusion matrices, and learning-rate sweeps.

mod eval;
mod train;

pub use eval::{confusion_topn, evaluate, evaluate_scores, ConfusionTopN, EvalReport};
pub use train::{lr_sweep, prepare_image, prepare_struct, train, EpochRecord, EpochSnapshot, MetricsReport, SweepArm, TrainConfig, TrainOutput};
