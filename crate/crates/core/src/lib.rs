//! k-nearest-neighbor classification over the penultimate-layer embeddings of
//! a network trained on noisy labels, and kNet, a small network that learns
//! to reproduce that kNN's voting vectors for any `k`.
//!
//! The pipeline mirrors the modules:
//!
//! 1. [`data`] generates (or loads) a labeled dataset,
//! 2. [`noise`] corrupts its labels through a transition matrix,
//! 3. [`prelim`] trains a classifier on the noisy labels and extracts embeddings,
//! 4. [`knn`] indexes the embeddings and votes,
//! 5. [`knet`] trains the approximating network on kNN votes,
//! 6. [`eval`] compares the three systems.
//!
//! Everything runs in `f64` on the CPU and is deterministic given a seed.

pub mod data;
pub mod error;
pub mod eval;
pub mod knet;
pub mod knn;
pub mod matrix;
pub mod nn;
pub mod noise;
pub mod prelim;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
