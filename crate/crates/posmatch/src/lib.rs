//! File formats, experiment harness and report tables around
//! [`posmatch_core`].
//!
//! - [`csvio`]: dataset CSV and schema sidecar.
//! - [`checkpoint`]: bit-exact JSON checkpoints.
//! - [`run`]: one training run and its artifacts.
//! - [`experiment`]: methods × seeds matrices.
//! - [`report`]: aggregate CSVs and markdown tables.
//! - [`config`]: TOML experiment specifications.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod error;
pub mod experiment;
pub mod report;
pub mod run;

pub use error::{Error, Result};
pub use posmatch_core as core;
