//! Desk-scale, embedding-conditioned latent diffusion.
//!
//! The crate is organized around a small tape-based autodiff engine
//! (`tensor`), an exactly invertible image/latent codec (`codec`), a
//! diffusion transformer backbone (`backbone`) with ControlNet and LoRA
//! adapters (`adapters`), reverse-process samplers (`sampler`), the
//! three-stage progressive training pipeline (`pipeline`), a rectified-flow
//! embedding translator (`flow`), generative-evaluation metrics (`metrics`)
//! and corpus construction utilities (`ingest`).

pub mod adapters;
pub mod backbone;
pub mod codec;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod flow;
pub mod imagebuf;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
