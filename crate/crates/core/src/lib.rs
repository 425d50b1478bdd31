//! Image-conditioned audio generation: a two-level VQ-VAE codec, Low and Up
//! token language models with classifier-free guidance, evaluation metrics,
//! synthetic datasets and file-based workflows.

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod datasets;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Codec32 = codec::CodecModel<f32>;
pub type Codec64 = codec::CodecModel<f64>;
pub type Lm32 = lm::LmModel<f32>;
pub type Lm64 = lm::LmModel<f64>;
