//! Estimation of average causal effects when confounders are missing not
//! at random, under outcome-independent missingness.
//!
//! The crate provides:
//! - an exact identification pipeline for finite-support data ([`discrete`]),
//! - a two-stage nonparametric estimator built on a constrained Hermite
//!   series inversion ([`series`], [`estimators`]),
//! - a parametric likelihood estimator fitted by fractional imputation,
//! - weighting and unadjusted baselines, bootstrap confidence intervals,
//!   and Monte Carlo simulation drivers ([`sim`]).

pub mod data;
pub mod discrete;
pub mod error;
pub mod estimators;
pub mod series;
pub mod sim;
pub mod smooth;

pub use data::{Dataset, Pattern, PatternIndex};
pub use error::{Error, Result};
