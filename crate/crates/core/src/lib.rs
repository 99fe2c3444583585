//! Capsule-network + LSTM video clip classifier.
//!
//! The crate builds a fixed layer stack — ConvLSTM over a 5-frame clip,
//! two plain convolutions, primary and secondary capsules with dynamic
//! routing-by-agreement, an LSTM over the class capsules and a dense softmax
//! head — entirely from scratch, with explicit backward passes for every
//! kernel, a finite-difference checking harness, a frame-sequence data
//! pipeline, a deterministic training loop and Grad-CAM heatmaps.

pub mod capsule;
pub mod data;
pub mod error;
pub mod explain;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
