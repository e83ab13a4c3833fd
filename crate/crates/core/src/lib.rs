//! Three-slice promptable segmentation of volumetric images.

pub mod bench;
pub mod error;
pub mod imgops;
pub mod inference;
pub mod model;
pub mod postprocess;
pub mod prompt;
pub mod pseudo;
pub mod slic;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
