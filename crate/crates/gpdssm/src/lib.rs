//! File formats, configuration, parallel execution and the command pipeline
//! around [`gpdssm_core`].

pub mod archive;
pub mod config;
pub mod error;
pub mod exec;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{AppError, Result};
