//! Byte-level hourglass language model with a learnable tokenizer.
//!
//! The model reads raw bytes, predicts segment boundaries with a small MLP,
//! mean-pools each segment into a token vector, runs a deeper transformer over
//! the shortened sequence and upsamples back to bytes. The boundary predictor
//! is kept inside a per-language rate band `beta <= k/N <= alpha` by a
//! two-sided hinge loss (or, as a baseline, pulled to a fixed rate by a
//! binomial prior).
//!
//! Module map:
//!
//! - [`bytes_data`]: byte vocabulary, corpus ingestion and chunking.
//! - [`calibration`]: per-language rate targets from a parallel corpus.
//! - [`boundary`]: boundary probabilities and straight-through hard sampling.
//! - [`model`]: the hourglass transformer with hand-written backward passes.
//! - [`objectives`]: boundary losses and language-modeling cross-entropy.
//! - [`train`]: optimizer, schedules, pretraining and finetuning loops.
//! - [`metrics`]: bits per byte, compression statistics, BPE comparator.
//! - [`synthetic`]: deterministic desk-scale corpora.

pub mod boundary;
pub mod bytes_data;
pub mod calibration;
pub mod checkpoint;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
