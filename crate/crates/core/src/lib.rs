//! Single-image dehazing with a pooling-transformer U-Net, a dark-channel
//! haze prior, hint distillation and Wasserstein adversarial training.
//!
//! The model code runs on the small autograd in `dpte-autograd`. Anything that
//! touches image files sits behind the `io` feature.

pub mod config;
pub mod container;
pub mod critic;
pub mod data;
pub mod distill;
pub mod error;
pub mod generator;
pub mod image;
#[cfg(feature = "io")]
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod priors;
pub mod ptb;
pub mod trainer;
pub mod vgg;

pub use error::{Error, Result};
pub use image::{ImageTensor, Map2};
