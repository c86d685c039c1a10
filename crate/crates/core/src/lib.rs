//! Masked latent transformer with a random masking ratio, built on a small
//! reverse-mode autodiff engine.
//!
//! The crate covers the full pipeline: image decoding and preprocessing,
//! the latent embedder, patch masking, the transformer encoder/decoder with
//! adaptive layer norm and relative position bias, losses and metrics, the
//! optimizer, checkpointing and the `mltr` command line tool.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
