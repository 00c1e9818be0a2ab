//! File formats, checkpoints, directory workflows and the command line for
//! the `wmcloak-core` toolkit.

pub mod backend;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
