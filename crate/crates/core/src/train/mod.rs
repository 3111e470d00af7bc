//! Synthetic data, optimization and evaluation.

pub mod augment;
pub mod data;
pub mod infer;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use data::{IGNORE_INDEX, LabelMap, SegSample, synth_dataset};
pub use infer::{evaluate, ms_flip_inference};
pub use metrics::{MiouResult, miou};
pub use optim::{AdamWConfig, LrSchedule, OptimState, poly_lr};
pub use trainer::{LogRow, TrainOutcome, train};
