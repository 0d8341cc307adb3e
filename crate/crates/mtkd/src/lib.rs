//! Filesystem side of the multi-teacher distillation engine: versioned
//! corpus, checkpoint, cache and run-record files, CSV reports, the
//! pipeline stages that produce them, and the `mtkd` command line.
//!
//! All computation is delegated to [`mtkd_core`]; this crate only adds
//! IO, hashing and worker threads.

pub mod analysis;
pub mod cli;
mod error;
pub mod formats;
pub mod pipeline;
mod workers;

pub use error::{Error, Result};
pub use workers::{parallel_map, thread_count};
