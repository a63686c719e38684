//! Invertible recurrent inference machines for linear inverse problems,
//! trained with constant-memory invertible learning: activations are
//! reconstructed through layer inverses during the backward pass instead of
//! being stored.
//!
//! The crate is organized bottom-up:
//! - [`numerics`], [`dft`], [`rng`], [`io`]: tensor substrate and plumbing
//! - [`forward_model`]: the subsampled-Fourier measurement operator
//! - [`layers`]: invertible coupling layers with orthogonal 1x1 embeddings
//! - [`model`]: the iterative inference state machine
//! - [`autodiff`]: stored-mode and invertible-mode reverse differentiation
//! - [`metrics`], [`train`]: losses, optimizer, training and evaluation
//! - [`phantom`]: synthetic complex-valued datasets
//! - [`config`], [`commands`]: run configuration and the CLI surface
//!
//! See the `examples/` directory for runnable entry points per capability.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod dft;
pub mod error;
pub mod forward_model;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod phantom;
pub mod rng;
pub mod train;

pub use error::{IrimError, Result};
