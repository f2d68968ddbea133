//! Deterministic random-number supply, time grids, and worker-count-independent
//! parallel reduction.
//!
//! Everything stochastic in this crate draws its noise through [`RngStream`],
//! a pure function of `(seed, experiment, path, step, block)`, and everything
//! that aggregates over paths goes through [`map_reduce_blocks`], which fixes
//! the floating-point summation tree independently of the number of worker
//! threads. Together these make every estimator bit-reproducible across
//! worker counts.

mod exec;
mod grid;
mod rng;

pub use exec::{map_reduce_blocks, resolve_workers, tree_reduce, BLOCK};
pub use grid::TimeGrid;
pub use rng::{philox4x32_10, RngStream};
