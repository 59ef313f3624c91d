//! Generative image compression at desk scale.
//!
//! A small convolutional codec with a mean-scale hyperprior is trained for
//! rate and distortion, then fine-tuned adversarially against a semantic
//! segmentation discriminator. A residual head on the generator's last
//! features lets the decoder move between the distortion-optimised and the
//! realistic reconstruction at decode time from one bitstream.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod digest;
pub mod discriminator;
pub mod entropy_coding;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod layers;
pub mod losses;
pub mod model;
pub mod realism;
pub mod segments;
pub mod training;

pub use error::{Error, Result};
