//! Single-shot low-light image deblurring.
//!
//! The crate covers the whole workflow: a feature-pyramid generator built
//! from dense-attention blocks and contextual gates, a conditional patch
//! discriminator, the multi-term training objective, synthetic motion-blur
//! generation, keypoint-based pair alignment, adversarial training with
//! checkpointing, and full-reference quality metrics.

pub mod blur;
pub mod cli;
pub mod data;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
