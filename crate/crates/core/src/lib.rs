//! Structured filter pruning for small convolutional networks.
//!
//! The pipeline trains a baseline network, scores every convolutional filter
//! with a fused gradient / Taylor / KL-divergence sensitivity metric, searches
//! per-layer pruning ratios with ε-greedy Q-table agents, physically removes
//! filters (rewiring downstream layers), and recovers accuracy with
//! knowledge-distillation fine-tuning.
//!
//! Everything runs on a small dense tensor engine with reverse-mode
//! differentiation ([`tensor`]), so results are bit-reproducible for a fixed
//! seed.

pub mod controller;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod prune;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::ModelGraph;
pub use tensor::{Real, Tensor};
