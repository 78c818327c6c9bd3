//! Masking, HOG supervision targets and the multi-scale reconstruction loss.

pub mod hog;
mod loss;
mod mask;

pub use hog::{build_targets, build_targets_for, hog_features, ChannelRule, HogConfig, SupervisionTarget};
pub use loss::{local_mim_loss, LossOutput, ScaleTerm};
pub use mask::{masked_count, sample_mask, MaskPlan};
