//! Spatio-temporal scale-selective bias correction of gridded precipitation
//! forecasts.
//!
//! The pipeline crops multi-scale windows around stations, picks a crop scale
//! per lag with auxiliary spatial predictors, picks a lag length per batch with
//! auxiliary temporal predictors, encodes the sequence through a denoising
//! encoder and a ConvLSTM, and regresses precipitation with an ordinal head
//! gated by a rain classifier.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sfm;
pub mod tensor;
pub mod tfm;
pub mod training;

pub use error::{Result, StasError};
pub use tensor::Tensor;
