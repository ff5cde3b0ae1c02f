//! Cascaded diffusion motion planning for 2D navigation.

pub mod cascade;
pub mod diffusion;
pub mod error;
pub mod expert;
pub mod nets;
pub mod refine;
pub mod seed;
pub mod workspace;

pub use error::{Error, Result};
