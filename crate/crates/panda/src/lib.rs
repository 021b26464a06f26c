//! File formats, folder datasets, run directories, evaluation reports and
//! the command-line front end around `panda-core`.

pub mod cli;
pub mod config_file;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod export;
pub mod run;

pub use error::{PandaError, Result};
pub use panda_core as core;
