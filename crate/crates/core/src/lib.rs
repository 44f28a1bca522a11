//! Desk-scale prompt tuning for a frozen dual-encoder model, with prior
//! knowledge infused into the learnable text prompts.
//!
//! The library is organised bottom-up:
//!
//! * [`tensor`] / [`graph`] — dense f64 tensors and a reverse-mode tape.
//! * [`nn`] — layer norm, multi-head attention and FFN compositions plus
//!   parameter containers for frozen encoder layers and fusion blocks.
//! * [`corpus`] — class/attribute knowledge files, vocabulary, tokenizer and
//!   the synthetic corpus generator.
//! * [`text_encoder`] — the frozen text path and the knowledge-infused
//!   prompted path (attribute-aware attention injected into the first J
//!   layers).
//! * [`vision`] — synthetic attribute-anchored images, the frozen vision
//!   encoder, and the text-to-vision prompt projection.
//! * [`objective`] — temperature-scaled class probabilities, cross-entropy,
//!   and the L1 feature-consistency term.
//! * [`model`] — configuration plus parameter assembly/registry.
//! * [`checkpoint`] — versioned, checksummed binary snapshots.
//! * [`train`] — few-shot training loop, evaluation protocols, reports.
//! * [`ablate`] — preset ablation grids and the paired significance test.

pub mod ablate;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod text_encoder;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
