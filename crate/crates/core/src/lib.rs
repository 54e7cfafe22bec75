//! Core of the AT-DKT knowledge tracing engine.
//!
//! Everything in this crate is pure computation over in-memory data and only
//! needs `alloc`: a small dense-tensor autodiff tape, the Adam optimizer,
//! KC-level data preparation, the AT-DKT model graph and its losses, metrics,
//! evaluation protocols, the training loop and a synthetic student simulator.
//! File formats, checkpoints and the CLI live in the `atdkt` crate.
//!
//! Disable the default `std` feature to build for `no_std` targets.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
