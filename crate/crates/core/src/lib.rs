//! Spatial pyramid of dilated local self-attention blocks for pixel-level
//! image manipulation localization, with a small trainable front end,
//! a synthetic tampering generator, training loop and evaluation tools.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
mod error;
pub mod imageio;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod pyramid;
pub mod training;

pub use error::{Error, Result, EXIT_CORRUPT, EXIT_NUMERIC, EXIT_USAGE};
