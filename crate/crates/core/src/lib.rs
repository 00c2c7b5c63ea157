//! Multi-encoder 3D multi-modal segmentation with a linear multi-source
//! correlation constraint and dual-attention fusion, plus the preprocessing,
//! losses, metrics, training loop, and a synthetic correlated phantom
//! generator that makes the whole pipeline testable on a desk-scale CPU.

pub mod attention;
pub mod correlation;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

// Feature maps and volumes in the public API are ndarray types.
pub use ndarray;
