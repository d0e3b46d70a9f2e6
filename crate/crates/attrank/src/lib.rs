//! File formats, experiment runners and the command line around
//! `attrank-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod runners;

pub use attrank_core as core;
pub use error::{Error, Result};
