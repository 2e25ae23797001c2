//! Adaptive experimental designs for estimating average treatment effects.
//!
//! Units arrive one at a time; a design picks a treatment probability, a
//! coin decides the arm and only the realized outcome is revealed. The
//! crate provides:
//!
//! - [`protocol`]: outcome/assignment types and the round protocol driver.
//! - [`designs`]: fixed Bernoulli designs and clipped online gradient
//!   descent on the Neyman objective (horizon-tuned and strongly-convex
//!   schedules).
//! - [`olo`]: scale-free FTRL on the nonnegative orthant and its
//!   sleeping-experts reduction.
//! - [`multigroup`]: the multigroup design aggregating per-group learners
//!   with sleeping experts.
//! - [`estimation`]: inverse-propensity ATE estimate, variance bound and
//!   Chebyshev intervals.
//! - [`evaluation`]: Neyman objectives, hindsight-optimal propensities and
//!   regret curves. Uses both potential outcomes; simulation only.
//! - [`data`]: Gaussian generators, CSV ingestion and score-quantile groups.
//! - [`harness`]: seeded Monte Carlo replication and report writing.

pub mod data;
pub mod designs;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod harness;
pub mod multigroup;
pub mod olo;
pub mod protocol;

pub use error::{Error, Result};
