//! Maximum-likelihood GLM fitting by iteratively reweighted least squares
//! for the binomial-logit, binomial-log and Poisson-log models.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FamilyLink, ModelSpec};
use crate::error::{Error, Result};
use crate::matrix::{spd_inverse, spd_solve, weighted_cross_product, Matrix};

pub const MAX_ITERATIONS: usize = 100;
pub const DEVIANCE_TOLERANCE: f64 = 1e-8;
pub const MAX_HALVINGS: usize = 20;
/// Log-binomial iterates must keep every fitted prevalence below `1 - LOG_BINOMIAL_MARGIN`.
pub const LOG_BINOMIAL_MARGIN: f64 = 1e-10;

const SEPARATION_COEF: f64 = 15.0;
const SEPARATION_PREVALENCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub column_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Model-based covariance, the inverse of `XᵀWX` at the optimum.
    pub vcov: Matrix,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    pub n_used: usize,
    /// Fitted means on the response scale.
    pub fitted: Vec<f64>,
}

impl FitResult {
    pub fn family_link(&self) -> FamilyLink {
        self.spec.family_link
    }

    pub fn std_error(&self, j: usize) -> f64 {
        self.vcov[(j, j)].max(0.0).sqrt()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn inv_logit(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-row quantities one IRLS step needs.
struct Working {
    /// Response-scale mean.
    mu: f64,
    /// IRLS weight `(dμ/dη)² / V(μ)`, before prior weights.
    weight: f64,
    /// Score factor `(dμ/dη) / V(μ)`.
    score: f64,
}

fn working(family: FamilyLink, eta: f64) -> Working {
    match family {
        FamilyLink::BinomialLogit => {
            let mu = inv_logit(eta);
            let one_minus = inv_logit(-eta);
            Working {
                mu,
                weight: mu * one_minus,
                score: 1.0,
            }
        }
        FamilyLink::BinomialLog => {
            let mu = eta.exp();
            let one_minus = -eta.exp_m1();
            Working {
                mu,
                weight: mu / one_minus,
                score: 1.0 / one_minus,
            }
        }
        FamilyLink::PoissonLog => {
            let mu = eta.exp();
            Working {
                mu,
                weight: mu,
                score: 1.0,
            }
        }
    }
}

pub(crate) fn linkinv(family: FamilyLink, eta: f64) -> f64 {
    match family {
        FamilyLink::BinomialLogit => inv_logit(eta),
        FamilyLink::BinomialLog | FamilyLink::PoissonLog => eta.exp(),
    }
}

fn link(family: FamilyLink, mu: f64) -> f64 {
    match family {
        FamilyLink::BinomialLogit => logit(mu),
        FamilyLink::BinomialLog | FamilyLink::PoissonLog => mu.ln(),
    }
}

/// Deviance contribution of one 0/1 observation, before the prior weight.
fn unit_deviance(family: FamilyLink, y: f64, eta: f64) -> f64 {
    match family {
        FamilyLink::BinomialLogit => {
            // -2 [y log μ + (1-y) log(1-μ)]
            2.0 * (y * softplus(-eta) + (1.0 - y) * softplus(eta))
        }
        FamilyLink::BinomialLog => {
            if y == 1.0 {
                -2.0 * eta
            } else {
                -2.0 * (-eta.exp_m1()).ln()
            }
        }
        FamilyLink::PoissonLog => {
            let mu = eta.exp();
            if y > 0.0 {
                2.0 * (y * (y.ln() - eta) - (y - mu))
            } else {
                2.0 * mu
            }
        }
    }
}

/// Linear predictor and deviance at `beta`; `None` when the iterate leaves
/// the parameter space.
fn evaluate(ds: &Dataset, family: FamilyLink, beta: &[f64]) -> Option<(Vec<f64>, f64)> {
    let eta = ds.x().mul_vec(beta).ok()?;
    if family == FamilyLink::BinomialLog {
        let ceiling = (1.0 - LOG_BINOMIAL_MARGIN).ln();
        if eta.iter().any(|e| !(*e < ceiling)) {
            return None;
        }
    }
    let dev: f64 = eta
        .iter()
        .zip(ds.y())
        .zip(ds.weights())
        .map(|((e, y), w)| w * unit_deviance(family, *y, *e))
        .sum();
    dev.is_finite().then_some((eta, dev))
}

/// Returns `(XᵀWX, score vector)` at the given linear predictor.
fn normal_equations(ds: &Dataset, family: FamilyLink, eta: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    let p = ds.x().cols();
    let mut weights = Vec::with_capacity(eta.len());
    let mut score = vec![0.0; p];
    for (i, &e) in eta.iter().enumerate() {
        let wk = working(family, e);
        let prior = ds.weights()[i];
        weights.push(prior * wk.weight);
        let r = prior * wk.score * (ds.y()[i] - wk.mu);
        for (s, x) in score.iter_mut().zip(ds.x().row(i)) {
            *s += x * r;
        }
    }
    Ok((weighted_cross_product(ds.x(), &weights)?, score))
}

fn starting_values(ds: &Dataset, family: FamilyLink) -> Result<Vec<f64>> {
    let total: f64 = ds.weights().iter().sum();
    let mean = ds
        .y()
        .iter()
        .zip(ds.weights())
        .map(|(y, w)| y * w)
        .sum::<f64>()
        / total;
    if mean <= 0.0 || (mean >= 1.0 && family != FamilyLink::PoissonLog) {
        return Err(Error::NoOutcomeVariation {
            events: ds.event_count(),
            n: ds.n(),
        });
    }
    let target = match family {
        FamilyLink::BinomialLog => mean * 0.9,
        _ => mean,
    };
    let mut beta = vec![0.0; ds.x().cols()];
    beta[0] = link(family, target);
    Ok(beta)
}

fn identifiability_error(ds: &Dataset, e: Error) -> Error {
    match e {
        Error::RankDeficient { column } => Error::NonIdentifiable {
            column: ds.column_names()[column].clone(),
        },
        other => other,
    }
}

/// Fits the GLM by IRLS with step-halving.
///
/// Iteration stops once `|dev_t - dev_{t-1}| / (|dev_t| + 0.1)` drops below
/// [`DEVIANCE_TOLERANCE`]; one further Newton step is then taken so the
/// coefficients sit at the optimum to working precision rather than one
/// step short of it.
pub fn fit_glm(ds: &Dataset, family: FamilyLink) -> Result<FitResult> {
    let mut beta = starting_values(ds, family)?;
    let (mut eta, mut dev) = evaluate(ds, family, &beta).ok_or_else(|| Error::NonConvergence {
        iterations: 0,
        reason: "starting values are outside the parameter space".into(),
    })?;

    let mut polishing = false;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (info, score) = normal_equations(ds, family, &eta)?;
        let delta = spd_solve(&info, &score).map_err(|e| identifiability_error(ds, e))?;

        let mut scale = 1.0;
        let mut accepted = None;
        let mut infeasible = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + scale * d)
                .collect();
            match evaluate(ds, family, &candidate) {
                Some((e, d)) if d <= dev + 1e-12 * (dev.abs() + 0.1) => {
                    accepted = Some((candidate, e, d));
                    break;
                }
                Some(_) => infeasible = false,
                None => infeasible = true,
            }
            scale *= 0.5;
        }

        let Some((candidate, new_eta, new_dev)) = accepted else {
            let tiny = delta
                .iter()
                .zip(&beta)
                .all(|(d, b)| d.abs() <= 1e-8 * (1.0 + b.abs()));
            if !infeasible && (polishing || tiny) {
                // no representable improvement left
                converged = true;
                break;
            }
            let reason = if infeasible {
                format!(
                    "step-halving could not keep fitted values in range after {MAX_HALVINGS} halvings"
                )
            } else {
                format!("step-halving could not reduce the deviance (deviance {dev:.6})")
            };
            return Err(Error::NonConvergence { iterations, reason });
        };

        let change = (new_dev - dev).abs() / (new_dev.abs() + 0.1);
        beta = candidate;
        eta = new_eta;
        dev = new_dev;
        if polishing {
            converged = true;
            break;
        }
        if change < DEVIANCE_TOLERANCE {
            polishing = true;
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            reason: format!("iteration limit reached (deviance {dev:.6})"),
        });
    }

    let (info, _) = normal_equations(ds, family, &eta)?;
    let vcov = spd_inverse(&info).map_err(|e| identifiability_error(ds, e))?;
    let fitted = eta.iter().map(|e| linkinv(family, *e)).collect();

    Ok(FitResult {
        spec: ModelSpec {
            family_link: family,
            ..ds.spec().clone()
        },
        column_names: ds.column_names().to_vec(),
        beta,
        vcov,
        converged,
        iterations,
        deviance: dev,
        n_used: ds.n(),
        fitted,
    })
}

/// Response-scale predictions `g⁻¹(Xβ)`.
pub fn predict_prevalence(fit: &FitResult, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != fit.beta.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, model has {} coefficients",
            x.cols(),
            fit.beta.len()
        )));
    }
    let family = fit.family_link();
    let eta = x.mul_vec(&fit.beta)?;
    let mu: Vec<f64> = eta.iter().map(|e| linkinv(family, *e)).collect();
    if family == FamilyLink::BinomialLog {
        if let Some(row) = mu.iter().position(|m| !(*m < 1.0)) {
            return Err(Error::InvalidPrevalence {
                row: row + 1,
                value: mu[row],
            });
        }
    }
    Ok(mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeparationWarning {
    LargeCoefficient { column: String, value: f64 },
    ExtremePrevalence { row: usize, value: f64 },
}

impl std::fmt::Display for SeparationWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeparationWarning::LargeCoefficient { column, value } => write!(
                f,
                "coefficient for `{column}` is {value:.3}; possible separation"
            ),
            SeparationWarning::ExtremePrevalence { row, value } => {
                write!(
                    f,
                    "fitted prevalence {value:e} at row {row} is at the boundary"
                )
            }
        }
    }
}

/// Flags fits whose coefficients or fitted prevalences suggest (quasi-)separation.
pub fn separation_check(fit: &FitResult) -> Vec<SeparationWarning> {
    let mut out: Vec<SeparationWarning> = fit
        .beta
        .iter()
        .zip(&fit.column_names)
        .filter(|(b, _)| b.abs() > SEPARATION_COEF)
        .map(|(b, c)| SeparationWarning::LargeCoefficient {
            column: c.clone(),
            value: *b,
        })
        .collect();
    // one warning for the first offending row is enough
    if let Some((i, m)) = fit
        .fitted
        .iter()
        .enumerate()
        .find(|(_, m)| **m < SEPARATION_PREVALENCE || **m > 1.0 - SEPARATION_PREVALENCE)
    {
        out.push(SeparationWarning::ExtremePrevalence {
            row: i + 1,
            value: *m,
        });
    }
    out
}
