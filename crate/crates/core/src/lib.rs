//! Lifelong mixture of VAE experts: a small reverse-mode autodiff engine,
//! Gaussian and discrete-latent experts, the mixture gate, dynamic
//! expansion, data loading, evaluation metrics and the lifelong trainer.

pub mod autodiff;
pub mod data;
pub mod discrete;
pub mod error;
pub mod expansion;
pub mod metrics;
pub mod mixture;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
