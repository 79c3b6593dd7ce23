pub mod app;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
