//! Alignment geometry, Schottky measures and pivotal extraction for products
//! of random matrices, with Monte Carlo estimators built on top.
//!
//! Modules:
//! - [`projgeo`]: scale-safe matrices, singular and spectral gaps, cones.
//! - [`alignment`]: coarse alignment, its discrete approximation, lemma checks.
//! - [`measures`]: step distributions, seeded streams, rank/kernel diagnostics.
//! - [`schottky`]: construction and validation of Schottky word measures.
//! - [`pivot`]: ping-pong extraction, the weighted pivot algorithm, toy model.
//! - [`estimators`]: escape rate, large deviations, convergence, tail toolbox.
//! - [`stats`]: interval estimates and goodness-of-fit helpers.

pub mod alignment;
pub mod estimators;
pub mod measures;
pub mod pivot;
pub mod projgeo;
pub mod schottky;
pub mod stats;
