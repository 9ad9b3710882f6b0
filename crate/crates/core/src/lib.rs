//! Leader-follower conditional diffusion for camouflaged object detection on
//! degraded images.
//!
//! A leader model is trained on high-quality images and then frozen. A
//! follower with the same denoiser topology is trained on bicubic-degraded
//! inputs and pulled toward the leader's conditional features and decoder
//! features with a configurable distance. Everything runs on the small
//! autodiff engine in `camorect-autograd`, at desk scale.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod models;
pub mod plane;
pub mod rectification;
pub mod training;

pub use error::{Error, Result};
