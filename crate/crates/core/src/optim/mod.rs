//! ADAM, dataset splitting, count metrics and the two training loops.

mod adam;
mod metrics;
mod split;
mod train;

pub use adam::AdamState;
pub use metrics::{metrics, Metrics};
pub use split::split_dataset;
pub use train::{
    flip, fpn_mask_mse, predict_counts, stack, train_counter, train_fpn, CountSample, EpochRecord,
    FpnSample, TrainOptions, TrainReport,
};
