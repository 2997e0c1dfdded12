//! File formats, dataset handling and the command-line front end for
//! brainstem parcellation. The numerics live in `stemnet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod nifti;
pub mod report;

pub use error::{CliError, Result};
