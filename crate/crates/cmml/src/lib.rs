//! Files, command line and benchmarks around `cmml-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use error::{Error, Result};
