//! Adaptive population-graph learning.
//!
//! A trainable attention vector weights per-subject phenotypes, the weighted
//! phenotypes drive a stochastic k-degree graph (Gumbel-Top-k over an
//! exponential distance kernel), and a graph convolutional network predicts a
//! node-level target on that graph. The supervised loss trains the GCN while a
//! reward-weighted log-probability loss trains the attention MLP and the kernel
//! temperature.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the experiment CLI live in the `popgraph` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod baselines;
pub mod dataio;
mod error;
pub mod gcn;
pub mod graphgen;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
