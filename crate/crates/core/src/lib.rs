//! Long/short-term video representation blocks for video person
//! re-identification, and a desk-scale pipeline around them.
//!
//! * [`tensor`]: dense tensors, reverse-mode tape, parameters, Adam, file IO.
//! * [`mae`]: multi-granularity appearance extractor.
//! * [`bme`]: bi-direction motion estimator.
//! * [`backbone`]: staged encoder with block insertion and the video head.

pub mod backbone;
pub mod bme;
pub mod data;
pub mod eval;
mod error;
pub mod features;
pub mod gradsuite;
pub mod layers;
pub mod mae;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
