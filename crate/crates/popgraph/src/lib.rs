//! Files, configuration and experiment orchestration around `popgraph-core`.
//!
//! * [`csvio`]: subject tables in and out, with a kind map saying which
//!   columns are phenotypes or node features.
//! * [`config`]: TOML experiment manifests and their content hash.
//! * [`export`]: graphs (dot, json), attention rankings, histories,
//!   metrics and checkpoints.
//! * [`runner`]: multi-seed training and ablation grids on a worker pool.
//! * [`commands`]: dataset generation and artifact export.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod export;
pub mod runner;

pub use error::{Error, Result};
