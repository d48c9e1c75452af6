//! File formats, experiment harness and command-line front end for the
//! MF² face model in `mf2-core`.

pub mod annotate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod files;
pub mod harness;
pub mod record;

pub use error::{Error, Result};
