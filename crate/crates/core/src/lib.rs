//! Kernels for virtual clinical trials of body-composition models.
//!
//! Everything in this crate is a pure function of its inputs and runs without
//! `std`: volumetric data model and resampling, Hounsfield-unit densitometry,
//! skeleton-based height measurement, anatomical consistency metrics, patch
//! aggregation, procedural phantoms, the statistics/forest kernel and the
//! trial orchestration that ties them together. File formats, the CLI and
//! parallel execution live in the `vct` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod anatomy;
pub mod composition;
mod error;
pub mod forest;
pub mod geometry;
pub mod linalg;
pub mod patch;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod trial;
pub mod volume;

pub use error::{Error, Result};
