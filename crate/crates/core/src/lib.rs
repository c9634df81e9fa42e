//! Robust sound event detection for bioacoustic sensor networks.

pub mod audio;
pub mod augment;
pub mod error;
pub mod evaluator;
pub mod context;
pub mod detector;
pub mod frontend;
pub mod io;
pub mod network;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};
