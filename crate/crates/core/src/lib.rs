//! Causal-driver portfolio construction.
//!
//! The pipeline selects common drivers for a set of assets, estimates each
//! asset's sensitivity to those drivers, embeds assets by the distance between
//! their sensitivity vectors, and allocates with Hierarchical Sensitivity
//! Parity (HSP): single-linkage ordering from sensitivity distances followed by
//! recursive bisection on the trailing covariance. Companion allocators,
//! SDE-based sensitivity path simulation and a rebalancing backtester are
//! provided alongside.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocation;
pub mod backtest;
pub mod driver_selection;
pub mod error;
pub mod linalg;
pub mod market_data;
pub mod par;
pub mod rng;
pub mod sde_paths;
pub mod sensitivity_geometry;
pub mod sensitivity_models;
pub mod synth;

pub use error::{Error, Result};
