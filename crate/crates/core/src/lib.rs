//! Learnable spatial feature-map masks for scene recognition.
//!
//! A compact convolutional encoder produces a `c × d × k` feature map. A single
//! learnable mask in `[0, 1]^{d × k}` (the sigmoid of free logits) is multiplied
//! into every channel before global average pooling and a linear head. Training
//! minimizes cross-entropy plus `λ · Σ|m_i|`, which pushes uninformative regions
//! of the mask toward zero.
//!
//! Module map:
//! - [`tensor`]: dense `f64` tensors and a define-by-run reverse-mode tape.
//! - [`mask`]: mask reparametrization, Hadamard application, L1 importance term.
//! - [`model`]: encoder configuration, parameters, baseline and masked heads.
//! - [`checkpoint`]: the `MASKHEAD1` binary parameter format.
//! - [`train`]: Adam, mini-batching, early stopping, evaluation.
//! - [`data`]: synthetic scenes, netpbm I/O, splitting, noise corruption.
//! - [`explain`]: Grad-CAM heatmaps and mask statistics.
//! - [`experiments`]: robustness and sensitivity sweeps, multi-seed reports.

pub mod checkpoint;
pub mod cli;
pub mod data;
mod error;
pub mod exec;
pub mod experiments;
pub mod explain;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use model::{EncoderConfig, ModelParams, Variant};
pub use tensor::{Gradients, Tape, Tensor, Var};
