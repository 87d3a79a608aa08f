//! LCD-Net: a lightweight siamese change-detection network built on a small
//! self-contained tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, kernels, the gradient tape, the archive format
//! * [`params`]: named parameter stores and the forward-pass session
//! * [`backbone`], [`tif`], [`ffm`], [`gmm`], [`decoder`]: network blocks
//! * [`model`]: the assembled network and inference
//! * [`profiler`]: parameter and multiply-accumulate accounting
//! * [`metrics`], [`data`], [`trainer`]: evaluation, data, optimisation

pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod ffm;
pub mod gmm;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod profiler;
pub mod tensor;
pub mod tif;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{LcdNet, ModelConfig};
