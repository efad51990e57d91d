//! Library half of the pipeline driver: configuration, stage manifests,
//! and the stage implementations the `uasim` binary dispatches to.

pub mod config;
pub mod errors;
pub mod manifest;
pub mod stages;
