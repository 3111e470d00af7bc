pub mod analysis;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod io;
pub mod model;
pub mod msca;
pub mod nmf;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use model::{DecoderKind, ModelConfig, SegModel, StageConfig};
pub use tensor::{ConvSpec, Real, Shape, Tensor};
