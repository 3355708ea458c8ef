//! IO, file formats, experiment orchestration and the command line for
//! the localization benchmark. All algorithms live in `semloc-core`; this
//! crate wires them to disk and to parallel execution.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod plots;

pub use error::{CliError, ErrorKind, Result};
