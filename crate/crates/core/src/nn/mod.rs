//! Parameter storage, layers built on it, and checkpoint files.

mod checkpoint;
mod layers;
mod registry;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    OptimizerSnapshot, CHECKPOINT_EXTENSION, CHECKPOINT_VERSION,
};
pub use layers::{BatchNorm, Conv2d, Linear, BN_EPS, BN_MOMENTUM};
pub use registry::{Param, ParamKind, ParamRegistry};
