//! Class-aware unified anomaly detection over dense feature maps.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — a minimal reverse-mode autodiff engine over dense
//!   multi-dimensional arrays (f32 for training, f64 for oracle and
//!   gradient tests).
//! * [`data`] — synthetic 2D toy datasets and multi-class feature-map
//!   datasets with ground-truth anomaly masks.
//! * [`mapper`], [`inr`], [`transformer`] — the model: feature adapter and
//!   two-stage classifier, the dual-path modulated sine INR that turns a
//!   class token into a per-position query map, and the denoising
//!   encoder/decoder reconstruction transformer.
//! * [`loss`], [`metrics`] — training objective (reconstruction, class
//!   cross-entropy, Gaussian prior) and evaluation (AUROC, AUPR, boundary
//!   diagnostics).
//! * [`model`], [`optim`], [`train`], [`experiments`] — the assembled
//!   pipeline, AdamW, the training loop, and the experiment drivers used
//!   by the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiments;
pub mod inr;
pub mod loss;
pub mod mapper;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use rng::RngStream;
pub use tensor::{Graph, NodeId, Real, Tensor, TensorError, TensorResult};
