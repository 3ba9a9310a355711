//! Semi-supervised weed distribution and density estimation from top-down
//! field images.

pub mod artifact;
pub mod backbone;
pub mod classify;
pub mod color;
pub mod config;
pub mod data_io;
pub mod density;
pub mod error;
pub mod features;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod slic;
pub mod synthfield;
pub mod tiling;
pub mod vegseg;

pub use error::{Error, Result};
