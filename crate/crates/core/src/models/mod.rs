//! The segmentation pyramid, the counting regressor and their losses.

mod counter;
mod fpn;
mod losses;

pub use counter::{CountConfig, CountModel, CountOutput, CountVars};
pub use fpn::{FpnConfig, FpnModel, FpnOutput, FpnVars};
pub use losses::{aleatoric_loss, ci95, fpn_loss, tv_loss, ConfidenceInterval, Z_95};

/// Filter count after applying a width multiplier: rounded up, at least one.
pub fn scaled_filters(filters: usize, width_multiplier: f64) -> usize {
    ((filters as f64 * width_multiplier).ceil() as usize).max(1)
}
