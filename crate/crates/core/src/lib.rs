//! Paired two-phase image synthesis with a shared-encoder VAE whose two
//! phase distributions are tied together by mean flipping.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod objectives;
pub mod phantoms;
pub mod synthesis;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use image::{Image, ValueRange};
