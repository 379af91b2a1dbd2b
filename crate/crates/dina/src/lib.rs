//! File formats, run configuration and the `dina` command-line driver on top
//! of `dina-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod profile;
