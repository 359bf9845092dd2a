//! Condition-injected U-Net separator trained on mixtures of mined anchors.

mod batch;
mod infer;
mod model;
mod train;

pub use batch::{make_training_batch, mix_at_0db, AnchorPool, Objective, TrainingExample};
pub use infer::{predict_present_then_separate, present_classes, separate, separate_many, separate_with, PRESENCE_THRESHOLD};
pub use model::{SeparatorModel, UNetConfig};
pub use train::{train_separator, ObjectiveTrend, SepTrainConfig, SepTrainReport};
