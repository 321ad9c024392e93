//! Fault detection and diagnosis for multichannel vehicle sensor streams:
//! tensors and reverse-mode autodiff, convolutional/recurrent hybrid models,
//! synthetic drive-cycle generation, preprocessing, training, evaluation, and
//! attribution methods for explaining trained classifiers.

pub mod datagen;
pub mod error;
pub mod gridsearch;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod report;
pub mod train;
pub mod tape;
pub mod tensor;
pub mod xai;

pub use error::{Result, XfddError};
pub use tensor::{Scalar, Tensor};
