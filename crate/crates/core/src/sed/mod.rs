//! Weak-label sound event detection, anchor mining and segment tagging.

mod anchors;
mod eval;
mod model;
mod train;

pub use anchors::{
    anchor_window, load_anchors, mine_anchors, save_anchors, select_anchor, tag_segment, tag_segments, AnchorRecord,
    AnchorSegment, AnchorWindow, ConditionVector,
};
pub use eval::{average_precision, evaluate_sed, mean_average_precision, SedEvalReport};
pub use model::{upsample, SedArch, SedModel, SedPrediction};
pub use train::{train_sed, SedTrainConfig, SedTrainReport};

pub(crate) use model::load_params;
