//! Core numerics for speech-driven gesture diffusion: a small reverse-mode
//! tensor engine, structured state-space (SSD) kernels, AdaLN Mamba-2 blocks,
//! the speech condition extractor, the gesture codec and the DDPM wrapper.

pub mod adaln;
pub mod alloc;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod clip;
pub mod codec;
pub mod condition;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod mamba;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ssd;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
