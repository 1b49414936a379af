//! File formats, dataset IO, run directories and the command line for
//! [`zssrt_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod report;
pub mod run;

pub use error::{AppError, Result};
