//! Constant-memory attention blocks (CMAB) and the attentive neural process
//! (CMANP) built from them.
//!
//! The first cross-attention of a block attends from a fixed, learned set of
//! latents to the input data. Because its queries never change, its output
//! can be kept as a running log-normalised average per latent row, which
//! absorbs new datapoints in time proportional to their count and lets the
//! whole block be evaluated over arbitrarily many inputs in bounded memory.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod check;
pub mod cmab;
pub mod cmanp;
pub mod config;
pub mod error;
pub mod instrument;
pub mod io;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real, RngState};
