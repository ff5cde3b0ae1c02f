//! Learnable components and their training machinery.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod train;

pub use model::{Conditioning, DenoiserConfig, DenoiserModel, Level};
pub use train::{OptimConfig, TrainSample, TrainState};
