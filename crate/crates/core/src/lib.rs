//! Content-adaptive super-resolution: images are cut into overlapping tiles,
//! a light classifier scores each tile's restoration difficulty, and each
//! tile is upscaled by an SR branch whose capacity matches that difficulty.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod models;
pub mod router;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
