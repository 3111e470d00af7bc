//! Configuration files, checkpoints and image files.

pub mod checkpoint;
pub mod config;
pub mod image;

pub use checkpoint::{Loaded, load_checkpoint, save_checkpoint};
pub use config::{DataConfig, EvalConfig, RunConfig, TrainConfig};
