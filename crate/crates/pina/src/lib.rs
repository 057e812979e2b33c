//! Deterministic simulator and library for two-stage clustered federated
//! learning with differential privacy.
//!
//! Stage 1 initializes cluster models privately: sampled clients fine-tune a
//! rank-1 low-rank adapter, keep only the two largest positive and two
//! largest negative update coordinates, privatize them with local DP at a
//! reduced clipping threshold, and the server k-means-clusters the pooled
//! sketches into initial prototypes. Stage 2 trains the cluster models:
//! clients pick the cluster with minimal empirical loss, train it locally,
//! and the server aggregates stacked updates through a distributed-DP secure
//! sum, equalizing aggregate norms early and scaling by Shapiro-Wilk
//! normality afterwards (zeroing near-Gaussian, pure-noise aggregates).
//!
//! A Renyi-DP accountant (subsampled Gaussian mechanism, integer-order
//! binomial bound) calibrates noise multipliers and reports spent budget.
//! Runs are bit-reproducible from `(config, seed)` for any worker count.

// Validation deliberately uses `!(x > 0.0)` so NaN fails the check too, and
// published approximation constants keep their full printed precision.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::excessive_precision)]

pub mod aggregate;
pub mod error;
pub mod model;
pub mod numeric;
pub mod privacy;
pub mod sim;
pub mod sketch;
pub mod stats;

pub use error::{Error, Result};
