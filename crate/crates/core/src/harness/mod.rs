//! Data, training, checkpointing and inference around the model.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ground;
pub mod synth;
pub mod train;
