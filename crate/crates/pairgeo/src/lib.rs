//! File formats, training orchestration and the `pairgeo` command line on
//! top of [`pairgeo_core`].

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{Error, Result};
