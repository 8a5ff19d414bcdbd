//! Event/illumination collaborative low-light image enhancement.
//!
//! - [`events`]: event records, EVT1/CSV files, frame-driven simulation, noise
//! - [`representation`]: SBT voxels, illumination prior, Retinex helpers, PPM/TNS1 I/O
//! - [`autodiff`]: tensors and reverse-mode differentiation
//! - [`eici`]: bidirectional event/illumination attention block
//! - [`iaef`]: illumination-aware adaptive event filter
//! - [`pipeline`]: end-to-end model, toy training, metrics and datasets
//! - [`gradsuite`]: finite-difference checks over ops, EICI and IAEF

pub mod autodiff;
pub mod eici;
pub mod error;
pub mod events;
pub mod gradsuite;
pub mod iaef;
pub mod layers;
pub mod pipeline;
pub mod representation;

pub use error::{Error, Result};
