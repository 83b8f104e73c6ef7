//! Training-free subject insertion by positional-embedding transplant, built
//! around a toy rectified-flow diffusion transformer.

pub mod error;
pub mod layout;
pub mod mmdit;
pub mod numkit;
pub mod raster;
pub mod rope;
pub mod sampler;
pub mod streams;
pub mod toyworld;

pub use error::{Error, Result};
