//! Estimation of time-varying causal excursion effects from clustered
//! micro-randomized-trial (MRT) panel data.
//!
//! The crate provides:
//!
//! - [`panel`] — a long-format data model for per-decision-point records
//!   grouped by cluster and individual, with CSV ingestion and validation;
//! - [`design`] — inverse-probability weights (marginal, lag-window, and
//!   pairwise), reference policies for future treatments, and centered
//!   design-row construction;
//! - [`estimate`] — three weighted least-squares estimators (WCLS with
//!   individuals as independent units, and cluster-based C-WCLS variants for
//!   direct and pairwise indirect effects) with cluster-robust sandwich
//!   covariances and an optional small-sample residual adjustment;
//! - [`simulate`] — generative models for the supported simulation scenarios,
//!   analytic effect values, and a forced-assignment Monte Carlo oracle;
//! - [`mc`] — a replication harness that reports estimate, SE, RMSE, and
//!   coverage across simulated datasets, plus coverage sweeps over group
//!   size or variance ratios.

pub mod design;
pub mod estimate;
pub mod mc;
pub mod panel;
pub mod simulate;
