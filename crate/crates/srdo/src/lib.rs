//! Deterministic simulator and library for straggler-robust distributed
//! optimization on a parameter-server network.
//!
//! Worker partitions carry cyclically coded sub-gradients so that any n - s
//! of them recover a partition gradient exactly; servers decode, take a
//! diminishing gradient step, and mix their estimates through a stochastic
//! matrix. The crate is organized around that pipeline:
//!
//! - [`linalg`], [`rng`]: dense matrix kernels and the seeded generator
//!   everything draws from.
//! - [`coding`]: encode matrix B, decode matrix A, and decode-row selection
//!   under arbitrary connectivity.
//! - [`problem`]: the planted least-squares instance and its partitioned
//!   gradients.
//! - [`network`]: assignment, straggler, and delay sampling plus the
//!   consensus mixing matrix.
//! - [`engine`]: the push / compute / pull-decode / descend / mix iteration
//!   with per-step perturbation records.
//! - [`metrics`]: AE/CE, the windowed martingale decay checkers, rate
//!   envelopes, and CSV rendering.
//! - [`config`], [`cli`]: TOML-configured experiments, seed sweeps, and the
//!   verification pass behind the `srdo` binary.

pub mod cli;
pub mod coding;
pub mod config;
pub mod engine;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod problem;
pub mod rng;
