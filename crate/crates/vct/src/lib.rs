//! File formats, cohort pipelines and the `vct` command line on top of
//! [`vct_core`].
//!
//! Volumes are stored as CTV pairs (JSON header plus raw little-endian
//! payload); uncompressed NIfTI-1 can be read. Per-subject work runs on a
//! rayon pool and is collected in input order, so every output is identical
//! for any thread count.

pub mod cli;
pub mod config;
pub mod consistency;
pub mod ctv;
pub mod error;
pub mod manifest;
pub mod nifti;
pub mod pipeline;
pub mod report;

pub use error::{Result, VctError};
pub use vct_core as core;
