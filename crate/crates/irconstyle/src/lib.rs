//! IRConStyle: a contrastive image-restoration framework.
//!
//! A ConStyle module (siamese encoder / momentum encoder pair with a FIFO
//! negative queue and InfoNCE + style + content losses) feeds latent features
//! into a pluggable U-Net restoration network. Everything runs on a small
//! from-scratch reverse-mode autodiff engine.

pub mod constyle;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod restore;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{grad_check, Scalar, Tensor};
