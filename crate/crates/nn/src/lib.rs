//! Minimal convolutional building blocks for the Triplet BiGAN networks.
//!
//! Everything runs in `f64` on the CPU with explicit forward traces and
//! hand-written backward passes. There is no global tape: a forward call
//! returns a [`sequential::Trace`] that the caller hands back to
//! `backward`, so a single network can be evaluated several times per step
//! (as the triplet branches require) without the passes interfering.
//!
//! All kernels are single-threaded and reduce in a fixed order, so results
//! are bit-reproducible for a fixed input.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod error;
pub mod gemm;
pub mod norm;
pub mod sequential;
pub mod tensor;

pub use activation::Activation;
pub use adam::{Adam, AdamConfig};
pub use conv::ConvGeometry;
pub use error::NnError;
pub use sequential::{LayerKind, LayerParams, LayerSpec, Mode, NetParams, Sequential, Trace};
pub use tensor::Tensor;
