//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! The engine is tape based: a [`Graph`] records every operation applied to
//! its [`Var`] handles, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients into a [`ParamStore`]. Only the operations needed by
//! convolutional image-to-image networks are provided.

mod adam;
mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod graph;
mod init;
pub mod kernels;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, MAGIC};
pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{Activation, Graph, Var};
pub use init::he_init;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
