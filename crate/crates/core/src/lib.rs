//! Grouped selective state-space models for point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors and a reverse-mode tape
//! * [`ssm`]: discretisation, scans and the grouped selective SSM
//! * [`serialization`]: axis sorting, prompts, position embeddings, merging
//! * [`blocks`]: Mamba units, bidirectional structures, the hexa-orientation block
//! * [`sampling`]: farthest point sampling, kNN pooling, interpolation
//! * [`network`]: encoder/decoder assembly and heads
//! * [`harness`]: synthetic data, training, metrics, ablations, gradient checks

pub mod blocks;
pub mod error;
pub mod harness;
pub mod layers;
pub mod network;
pub mod numerics;
pub mod params;
pub mod sampling;
pub mod serialization;
pub mod ssm;

pub use error::{Error, Result};
