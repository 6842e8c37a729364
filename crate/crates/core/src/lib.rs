//! Multimodal temporal expression classification.
//!
//! Per-frame visual and audio features are concatenated and projected by an
//! affine fusion layer, encoded per segment by an LSTM (with state carried
//! across segments) or a Transformer encoder, and classified into eight
//! expression classes. Training uses an RDrop objective; evaluation reports
//! macro F1 over all eight classes; predictions from several runs can be
//! combined by vote.

pub mod cli;
pub mod data;
pub mod ensemble;
pub mod evaluation;
pub mod error;
pub mod io;
pub mod models;
pub mod training;

pub use error::{Error, Result};
