//! Low-dose CT denoising with a cascade of a perceptual-loss dilated residual
//! network and an MSE-trained difference-image network.
//!
//! The crate also ships a parallel-beam acquisition simulator so the whole
//! pipeline can be trained and checked on synthetic phantoms.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod error;
mod font;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod simulate;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
