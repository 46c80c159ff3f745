//! Multi-instance video object segmentation with U-Net style networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`] and [`autodiff`]: dense tensors and a tape-based
//!   reverse-mode differentiator for the layer primitives.
//! - [`network`]: U-Net and skip-less encoder-decoder builders.
//! - [`losses`]: weighted cross-entropy and soft dice.
//! - [`isolation`]: instance masks, per-instance binary problems and merging.
//! - [`metrics`]: region similarity J and boundary F.
//! - [`dataset`]: synthetic moving-shapes videos, directory layout and PNM codecs.
//! - [`trainer`]: optimizers, parent training, first-frame fine-tuning, prediction.
//! - [`gradcheck`]: finite-difference checks of every backward rule.
//! - [`cli`]: the `unet-vos` command line.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod isolation;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
