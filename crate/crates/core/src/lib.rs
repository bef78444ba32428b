//! Spatiotemporal video prediction with MotionRNN.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`Tape`], [`Var`]),
//! convolution primitives, the ConvLSTM backbone, the MotionGRU unit and the
//! stacked MotionRNN model, along with synthetic data generation, training
//! and evaluation metrics.

pub mod cells;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod motion_gru;
pub mod nn;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
