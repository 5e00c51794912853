//! Text-conditioned human pose synthesis with a conditional Wasserstein GAN.
//!
//! Poses are 17 COCO keypoints encoded as `17 x 64 x 64` Gaussian heatmaps;
//! captions become 300-d sentence embeddings. A transposed-convolution
//! generator maps noise and text to heatmaps, and a convolutional critic
//! scores (heatmap, text) pairs under a Lipschitz or gradient penalty.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod posecodec;
pub mod training;
pub mod textenc;

pub use error::{Error, Result};
