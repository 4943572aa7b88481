//! Adjusted prevalence ratios for cross-sectional studies.
//!
//! The central estimators derive conditional and marginal prevalence
//! ratios from a fitted logistic model, with delta-method intervals. The
//! crate also provides the usual comparison estimators (log-binomial,
//! robust Poisson, prevalence odds ratio, Mantel-Haenszel, and logistic
//! regression on event-duplicated data) and a simulation harness that
//! measures their bias and coverage.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod cli;
pub mod data;
pub mod error;
pub mod glm;
pub mod matrix;
pub mod pr;
pub mod simulate;
pub mod variance;

pub use data::{covariate_means, load_csv, set_exposure_value, Dataset, FamilyLink, ModelSpec};
pub use error::{Error, Result};
pub use glm::{fit_glm, predict_prevalence, separation_check, FitResult};
pub use matrix::Matrix;
pub use pr::{Method, PrEstimate};
pub use variance::{wald_ci_log_scale, IntervalEstimate};
