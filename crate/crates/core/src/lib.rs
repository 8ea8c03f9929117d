//! Recursive proposal refinement with reversible gates and an instance-aware
//! denoising autoencoder for instance segmentation, at desk scale.

pub mod config;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod recursion;
pub mod refinenet;
pub mod segnet;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
