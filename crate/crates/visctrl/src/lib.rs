//! Training-free latent editing on a deterministic toy denoiser.
//!
//! A reference image's self-attention key/value features are captured
//! during its DDIM reconstruction and injected into the denoising of a
//! target image, iteratively, so the reference subject's appearance
//! migrates into the masked target region while compositing keeps the
//! background byte-identical. A gradual-sampling variant extends the same
//! loop to frame sequences and small multi-reference sets.
//!
//! Everything is seeded and accumulation orders are fixed, so whole runs
//! are reproducible bit-for-bit.

// Kernels spell out their loop order; that order is the determinism
// contract, so keep the explicit index loops.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]

pub mod attn_control;
pub mod commands;
pub mod config;
pub mod container;
pub mod denoiser;
pub mod error;
pub mod fgs;
pub mod imgio;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod scheduler;

pub use error::{Error, Result};
