//! Open-vocabulary multi-label recognition on a frozen encoder.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! * [`params`]: named parameters, freeze flags and the AdamW optimizer.
//! * [`backbone`]: a seeded, frozen transformer standing in for a pretrained
//!   image/text encoder.
//! * [`arm`]: the parasitic refinement pathway (LoRA attention, depthwise
//!   convolution, cross-attention, residual head).
//! * [`wps`]: patch-class scoring, EM responsibilities and the weakly
//!   supervised patch-selection loss with hard-negative mining.
//! * [`atm`]: multi-head GATv2 message passing over the class graph.
//! * [`crg`]: class-relationship-graph mining from an LLM (live or replay).
//! * [`metrics`]: AP / mAP / top-K precision, recall, F1 and ZSL/GZSL splits.
//! * [`pipeline`]: model assembly, training, checkpoints and evaluation.
//! * [`gradcheck`]: end-to-end finite-difference verification.

pub mod arm;
pub mod atm;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod crg;
pub mod error;
pub mod files;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod wps;

pub use error::{Error, Result};
pub use tensor::Tensor;
