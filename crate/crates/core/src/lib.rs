//! Allocation-only core of the multi-teacher distillation engine.
//!
//! Everything here is a pure function of its inputs and seeds: a small
//! reverse-mode differentiation engine, the synthetic corpus generator,
//! edit-distance metrics, a joint CTC-attention sequence model, the
//! distillation losses, the teacher-weighting strategies, and the training
//! loops that tie them together. File formats, threading and the command
//! line live in the `mtkd` companion crate.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod corpus;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod strategies;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, NodeId, Real, Tensor};
