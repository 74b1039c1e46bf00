//! Monte Carlo solver for decoupled forward-backward SDEs stopped at the
//! first exit of a cylindrical domain `[0, T) x O`.
//!
//! The forward component is simulated by the Euler scheme on a uniform grid
//! with the exit detected on grid points; the backward component is solved by
//! dynamic programming with regression-based conditional expectations and an
//! implicit Picard step, freezing values at the discrete exit. An analysis
//! layer reconstructs reference solutions along bridge-refined paths and fits
//! empirical convergence slopes across step-size ladders.

pub mod analysis;
pub mod benchmarks;
pub mod bsde;
pub mod config;
pub mod dynamics;
pub mod geometry;
pub mod regression;
pub mod rng;
pub mod runner;
