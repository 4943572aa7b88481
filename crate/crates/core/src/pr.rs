//! Prevalence ratios derived from a fitted logistic model.
//!
//! The conditional ratio (CPR) compares predicted prevalences for a single
//! covariate profile, by default the prior-weighted covariate means. The
//! marginal ratio (MPR) compares predicted prevalences averaged over every
//! observed covariate profile. Both get delta-method standard errors from
//! the model-based coefficient covariance.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{covariate_means, Dataset, FamilyLink, EXPOSURE_COLUMN};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, inv_logit, separation_check, FitResult};
use crate::matrix::dot;
use crate::simulate::replicate_rng;
use crate::variance::{check_level, ratio_from_log_scale, wald_ci_log_scale, IntervalEstimate};

/// Smallest reference prevalence a ratio may be divided by.
const MIN_REFERENCE_PREVALENCE: f64 = 1e-12;
pub const MIN_BOOTSTRAP_REPS: usize = 100;
/// Largest tolerated fraction of failed bootstrap refits.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    RobustPoisson,
    LogBinomial,
    #[serde(rename = "POR")]
    Por,
    #[serde(rename = "CPR")]
    Cpr,
    #[serde(rename = "MPR")]
    Mpr,
    Schouten,
    MantelHaenszel,
    Crude,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::RobustPoisson,
        Method::LogBinomial,
        Method::Por,
        Method::Cpr,
        Method::Mpr,
        Method::Schouten,
        Method::MantelHaenszel,
        Method::Crude,
    ];

    /// Short command-line name.
    pub fn key(self) -> &'static str {
        match self {
            Method::RobustPoisson => "poisson",
            Method::LogBinomial => "logbinomial",
            Method::Por => "por",
            Method::Cpr => "cpr",
            Method::Mpr => "mpr",
            Method::Schouten => "schouten",
            Method::MantelHaenszel => "mh",
            Method::Crude => "crude",
        }
    }

    pub fn from_key(key: &str) -> Result<Method> {
        let k = key.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.key() == k)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{key}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::RobustPoisson => "Robust Poisson",
            Method::LogBinomial => "Log-binomial",
            Method::Por => "POR",
            Method::Cpr => "CPR",
            Method::Mpr => "MPR",
            Method::Schouten => "Schouten",
            Method::MantelHaenszel => "MH PR",
            Method::Crude => "Crude PR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrEstimate {
    pub method: Method,
    pub exposure: String,
    pub interval: IntervalEstimate,
    /// Caveats attached to the estimate: convergence, separation, data loss.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl PrEstimate {
    pub fn new(method: Method, exposure: impl Into<String>, interval: IntervalEstimate) -> Self {
        Self {
            method,
            exposure: exposure.into(),
            interval,
            notes: Vec::new(),
        }
    }

    pub fn point(&self) -> f64 {
        self.interval.point
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

fn require_logistic(fit: &FitResult) -> Result<()> {
    if fit.family_link() != FamilyLink::BinomialLogit {
        return Err(Error::WrongFamily {
            expected: FamilyLink::BinomialLogit.to_string(),
            actual: fit.family_link().to_string(),
        });
    }
    if !fit.converged {
        return Err(Error::UnconvergedFit);
    }
    Ok(())
}

fn check_column(fit: &FitResult, column: usize) -> Result<()> {
    if column == 0 || column >= fit.beta.len() {
        return Err(Error::InvalidArgument(format!(
            "column {column} is not a predictor of a model with {} coefficients",
            fit.beta.len()
        )));
    }
    Ok(())
}

/// Quotient-rule gradient of `p1 / p0` given the gradients of each prevalence.
fn ratio_gradient(p1: f64, grad1: &[f64], p0: f64, grad0: &[f64]) -> Vec<f64> {
    grad1
        .iter()
        .zip(grad0)
        .map(|(d1, d0)| (d1 * p0 - d0 * p1) / (p0 * p0))
        .collect()
}

fn check_reference(p0: f64) -> Result<()> {
    if p0 < MIN_REFERENCE_PREVALENCE {
        return Err(Error::DegenerateDenominator(p0));
    }
    Ok(())
}

/// Conditional prevalence ratio at covariate profile `point` and its
/// gradient with respect to the coefficients.
///
/// `point` is a full design row including the intercept; its entry at
/// `column` is replaced by 1 and 0 for the two prevalences.
pub fn cpr_with_gradient(beta: &[f64], point: &[f64], column: usize) -> Result<(f64, Vec<f64>)> {
    if point.len() != beta.len() {
        return Err(Error::Dimension(format!(
            "profile has {} entries, model has {} coefficients",
            point.len(),
            beta.len()
        )));
    }
    let mut profile = point.to_vec();
    let mut prevalence = |value: f64| {
        profile[column] = value;
        let p = inv_logit(dot(beta, &profile));
        let grad: Vec<f64> = profile.iter().map(|x| x * p * (1.0 - p)).collect();
        (p, grad)
    };
    let (p1, g1) = prevalence(1.0);
    let (p0, g0) = prevalence(0.0);
    check_reference(p0)?;
    Ok((p1 / p0, ratio_gradient(p1, &g1, p0, &g0)))
}

/// Marginal prevalence ratio and its gradient: predicted prevalences are
/// averaged (with prior weights) over all rows with `column` set to 1 and 0.
pub fn mpr_with_gradient(beta: &[f64], ds: &Dataset, column: usize) -> Result<(f64, Vec<f64>)> {
    let x = ds.x();
    if x.cols() != beta.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, model has {} coefficients",
            x.cols(),
            beta.len()
        )));
    }
    let total: f64 = ds.weights().iter().sum();
    let p = beta.len();
    let mut row = vec![0.0; p];
    let mut average = |value: f64| {
        let mut prev = 0.0;
        let mut grad = vec![0.0; p];
        for (i, w) in ds.weights().iter().enumerate() {
            row.copy_from_slice(x.row(i));
            row[column] = value;
            let pi = inv_logit(dot(beta, &row));
            prev += w * pi;
            let d = w * pi * (1.0 - pi);
            for (g, xv) in grad.iter_mut().zip(&row) {
                *g += d * xv;
            }
        }
        grad.iter_mut().for_each(|g| *g /= total);
        (prev / total, grad)
    };
    let (p1, g1) = average(1.0);
    let (p0, g0) = average(0.0);
    check_reference(p0)?;
    Ok((p1 / p0, ratio_gradient(p1, &g1, p0, &g0)))
}

fn delta_estimate(
    method: Method,
    fit: &FitResult,
    ds: Option<&Dataset>,
    column: usize,
    ratio: f64,
    gradient: &[f64],
    level: f64,
) -> Result<PrEstimate> {
    let var = fit.vcov.quadratic_form(gradient)?;
    let interval = wald_ci_log_scale(ratio, var.max(0.0).sqrt(), level)?;
    let mut est = PrEstimate::new(method, fit.column_names[column].clone(), interval);
    attach_fit_notes(&mut est, fit);
    if let Some(ds) = ds {
        if !ds.is_binary_column(column) {
            est.notes.push(format!(
                "`{}` is not binary; ratio compares value 1 with value 0",
                fit.column_names[column]
            ));
        }
    }
    Ok(est)
}

pub(crate) fn attach_fit_notes(est: &mut PrEstimate, fit: &FitResult) {
    est.notes
        .extend(separation_check(fit).iter().map(ToString::to_string));
}

/// CPR for the exposure at the weighted covariate means.
pub fn conditional_pr(fit: &FitResult, ds: &Dataset, level: f64) -> Result<PrEstimate> {
    let point = covariate_means(ds);
    conditional_pr_at(fit, ds, EXPOSURE_COLUMN, &point, level)
}

/// CPR for design column `column` at an arbitrary covariate profile.
pub fn conditional_pr_at(
    fit: &FitResult,
    ds: &Dataset,
    column: usize,
    point: &[f64],
    level: f64,
) -> Result<PrEstimate> {
    require_logistic(fit)?;
    check_column(fit, column)?;
    let (ratio, grad) = cpr_with_gradient(&fit.beta, point, column)?;
    delta_estimate(Method::Cpr, fit, Some(ds), column, ratio, &grad, level)
}

/// Weighted covariate means with some entries replaced by user-chosen values.
pub fn conditioning_point(ds: &Dataset, overrides: &[(String, f64)]) -> Result<Vec<f64>> {
    let mut point = covariate_means(ds);
    for (name, value) in overrides {
        match ds.column_index(name) {
            Some(j) if j > EXPOSURE_COLUMN => point[j] = *value,
            Some(_) => {
                return Err(Error::InvalidArgument(format!(
                    "`{name}` is not a covariate and cannot be conditioned on"
                )))
            }
            None => return Err(Error::MissingColumn(name.clone())),
        }
    }
    Ok(point)
}

/// MPR for the exposure.
pub fn marginal_pr(fit: &FitResult, ds: &Dataset, level: f64) -> Result<PrEstimate> {
    marginal_pr_for(fit, ds, EXPOSURE_COLUMN, level)
}

pub fn marginal_pr_for(
    fit: &FitResult,
    ds: &Dataset,
    column: usize,
    level: f64,
) -> Result<PrEstimate> {
    require_logistic(fit)?;
    check_column(fit, column)?;
    let (ratio, grad) = mpr_with_gradient(&fit.beta, ds, column)?;
    delta_estimate(Method::Mpr, fit, Some(ds), column, ratio, &grad, level)
}

/// Adjusted prevalence odds ratio `exp(β)` for the exposure.
pub fn prevalence_odds_ratio(fit: &FitResult, level: f64) -> Result<PrEstimate> {
    prevalence_odds_ratio_for(fit, EXPOSURE_COLUMN, level)
}

pub fn prevalence_odds_ratio_for(fit: &FitResult, column: usize, level: f64) -> Result<PrEstimate> {
    require_logistic(fit)?;
    check_column(fit, column)?;
    let interval = ratio_from_log_scale(fit.beta[column], fit.std_error(column), level)?;
    let mut est = PrEstimate::new(Method::Por, fit.column_names[column].clone(), interval);
    attach_fit_notes(&mut est, fit);
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootstrapTarget {
    Conditional,
    Marginal,
}

impl BootstrapTarget {
    fn estimate(self, fit: &FitResult, ds: &Dataset) -> Result<f64> {
        let (ratio, _) = match self {
            BootstrapTarget::Conditional => {
                cpr_with_gradient(&fit.beta, &covariate_means(ds), EXPOSURE_COLUMN)?
            }
            BootstrapTarget::Marginal => mpr_with_gradient(&fit.beta, ds, EXPOSURE_COLUMN)?,
        };
        Ok(ratio)
    }

    fn method(self) -> Method {
        match self {
            BootstrapTarget::Conditional => Method::Cpr,
            BootstrapTarget::Marginal => Method::Mpr,
        }
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval around a full-data point estimate.
///
/// The bounds are widened to include the point when resampling puts it
/// outside the percentile range; the returned flag reports that.
pub(crate) fn percentile_interval(
    point: f64,
    replicates: &[f64],
    level: f64,
) -> Result<(IntervalEstimate, bool)> {
    check_level(level)?;
    if replicates.is_empty() {
        return Err(Error::InvalidArgument("no bootstrap replicates".into()));
    }
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lower = quantile_sorted(&sorted, alpha / 2.0);
    let upper = quantile_sorted(&sorted, 1.0 - alpha / 2.0);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let se = if sorted.len() > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let widened = point < lower || point > upper;
    Ok((
        IntervalEstimate {
            point,
            se,
            lower: lower.min(point),
            upper: upper.max(point),
            level,
        },
        widened,
    ))
}

/// Case-resampling percentile bootstrap for CPR or MPR.
///
/// Replicate `r` draws its rows from the substream `(seed, r)`, so the
/// result does not depend on how replicates are scheduled across threads.
pub fn bootstrap_pr(
    ds: &Dataset,
    target: BootstrapTarget,
    reps: usize,
    seed: u64,
    level: f64,
) -> Result<PrEstimate> {
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPS} replicates, got {reps}"
        )));
    }
    check_level(level)?;
    let full_fit = fit_glm(ds, FamilyLink::BinomialLogit)?;
    let point = target.estimate(&full_fit, ds)?;
    let n = ds.n();

    let draws: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = ds.select_rows(&rows).ok()?;
            let fit = fit_glm(&sample, FamilyLink::BinomialLogit).ok()?;
            target
                .estimate(&fit, &sample)
                .ok()
                .filter(|v| v.is_finite())
        })
        .collect();

    let values: Vec<f64> = draws.iter().flatten().copied().collect();
    let failed = reps - values.len();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE * reps as f64 {
        return Err(Error::UnstableBootstrap {
            failed,
            total: reps,
        });
    }
    let (interval, widened) = percentile_interval(point, &values, level)?;
    let mut est = PrEstimate::new(
        target.method(),
        full_fit.column_names[EXPOSURE_COLUMN].clone(),
        interval,
    )
    .with_note(format!(
        "bootstrap percentile interval: {} replicates, {failed} failed",
        reps
    ));
    if widened {
        est.notes.push(
            "point estimate fell outside the percentile range; bounds widened to include it".into(),
        );
    }
    Ok(est)
}
