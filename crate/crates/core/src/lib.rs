//! Unsupervised re-identification by noise-consistency contrastive learning.
//!
//! Two encoder branches see an image and a copy whose most activated pixels
//! were blanked out. Their embeddings, and a fused embedding of both, are
//! trained against per-cluster memory banks built from DBSCAN pseudo-labels,
//! with an extra term pulling the original and noised embeddings together.
//!
//! Everything numeric runs on the small tape-based autodiff in [`tensorcore`].

pub mod clustering;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fana;
pub mod losses;
pub mod memory;
pub mod tensorcore;
pub mod toolkit;
pub mod trainer;

pub use error::{Error, Result};
pub use tensorcore::{NodeId, Tape, Tensor};
