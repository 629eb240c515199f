//! Unsupervised segmentation of grayscale images by training a U-Net against
//! hidden-Markov-random-field energies.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod discrete;
mod error;
pub mod eval;
pub mod experiments;
pub mod fuzzy;
pub mod neighborhood;
pub mod train;
pub mod types;
pub mod unet;

pub use error::{Error, Result};
