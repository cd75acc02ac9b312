//! File formats, layered configuration, reports and the `gmoe` command line
//! on top of `gmoe-core`.
//!
//! Datasets are stored as GMDS files and checkpoints as GMCK files; both use
//! the checksummed [`container`] layout.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod manifest;
pub mod plot;
pub mod report;
