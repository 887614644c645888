//! Associative-memory recurrent networks built on holographic reduced
//! representations.
//!
//! - [`hrr`]: complex binding algebra and the redundant memory array.
//! - [`autodiff`]: the tape used to train everything end to end.
//! - [`cells`]: GRU and LSTM cell functions.
//! - [`am_rnn`]: the AM-RNN wrapper and its dual-memory extension.
//! - [`models`]: entailment classifier and sequence auto-encoder.
//! - [`train`]: ADAM, learning-rate halving, dropout, training loop.
//! - [`data`]: synthetic tasks, JSON Lines loading, vocabularies.
//! - [`analysis`]: cosine heatmaps, retrieval-noise benchmark, key collapse.
//! - [`experiment`]: configuration and the experiment runner behind the CLI.

pub mod am_rnn;
pub mod analysis;
pub mod autodiff;
pub mod cells;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hrr;
pub mod models;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
