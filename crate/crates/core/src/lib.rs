//! Two-stage cell counting for microscopy images.
//!
//! A feature pyramid network turns a grayscale image into foreground masks at four
//! scales, each with a per-pixel log-variance. A VGG-11-style regressor turns the
//! finest mask into a cell count plus its own log-variance, which yields a 95%
//! confidence interval. Everything runs on the small reverse-mode autodiff core in
//! [`tensor`]; [`simdata`] renders synthetic microscopy data to train and test on.

pub mod cli;
pub mod error;
pub mod interpret;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod simdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Mode, Tape, Tensor, Var};
