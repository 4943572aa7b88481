//! Toy data-generating process and replication studies.
//!
//! Data follow a logistic model with a binary exposure `x ~ Bernoulli(p)`
//! and a standard-normal confounder `z`. The coefficients are pinned by a
//! baseline prevalence, the prevalence ratio at `z = 0`, and the confounder
//! slope.
//!
//! Random numbers come from ChaCha8 seeded with the study seed, and
//! replicate `r` reads ChaCha stream `r`. Every replicate is therefore a
//! pure function of `(seed, r)`, and parallel runs match serial runs bit
//! for bit.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{log_binomial_pr, robust_poisson_pr, schouten_pr};
use crate::data::{covariate_means, Dataset, FamilyLink, ModelSpec, EXPOSURE_COLUMN};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, inv_logit, logit};
use crate::pr::{conditional_pr, marginal_pr, prevalence_odds_ratio, Method, PrEstimate};
use crate::variance::{check_level, normal_quantile, IntervalEstimate};

pub const MIN_STUDY_REPS: usize = 100;
/// Gauss-Hermite nodes used for the marginal truth.
pub const QUADRATURE_NODES: usize = 64;

/// Methods a replication study can run on toy data.
pub const STUDY_METHODS: [Method; 6] = [
    Method::RobustPoisson,
    Method::LogBinomial,
    Method::Por,
    Method::Cpr,
    Method::Mpr,
    Method::Schouten,
];

/// Generator for replicate `index` under `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform draw on the open interval (0, 1) from the top 53 bits.
fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n: usize,
    pub p_exposure: f64,
    pub baseline_prevalence: f64,
    pub pr_at_z0: f64,
    pub beta_z: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            p_exposure: 0.5,
            baseline_prevalence: 0.20,
            pr_at_z0: 2.0,
            beta_z: 0.20,
            seed: 1,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if self.n == 0 {
            return Err(Error::InvalidArgument(
                "sample size must be positive".into(),
            ));
        }
        if !open(self.p_exposure) {
            return Err(Error::InvalidArgument(format!(
                "exposure probability {} must lie in (0, 1)",
                self.p_exposure
            )));
        }
        if !open(self.baseline_prevalence) {
            return Err(Error::InvalidArgument(format!(
                "baseline prevalence {} must lie in (0, 1)",
                self.baseline_prevalence
            )));
        }
        let exposed = self.baseline_prevalence * self.pr_at_z0;
        if !(self.pr_at_z0 > 0.0) || !open(exposed) {
            return Err(Error::InvalidArgument(format!(
                "implied exposed prevalence {exposed} at z = 0 must lie in (0, 1)"
            )));
        }
        if !self.beta_z.is_finite() {
            return Err(Error::InvalidArgument(
                "confounder slope must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Logistic coefficients of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpCoefficients {
    pub intercept: f64,
    pub exposure: f64,
    pub confounder: f64,
}

impl DgpCoefficients {
    pub fn prevalence(&self, x: f64, z: f64) -> f64 {
        inv_logit(self.intercept + self.exposure * x + self.confounder * z)
    }
}

pub fn dgp_coefficients(cfg: &ToyConfig) -> Result<DgpCoefficients> {
    cfg.validate()?;
    let base = logit(cfg.baseline_prevalence);
    Ok(DgpCoefficients {
        intercept: base,
        exposure: logit(cfg.baseline_prevalence * cfg.pr_at_z0) - base,
        confounder: cfg.beta_z,
    })
}

/// True prevalence ratio for the exposure at confounder value `z`.
pub fn true_conditional_pr(coeffs: &DgpCoefficients, z: f64) -> f64 {
    coeffs.prevalence(1.0, z) / coeffs.prevalence(0.0, z)
}

/// Gauss-Hermite nodes and weights for `∫ f(x) exp(-x²) dx`, by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[f(Z)]` for `Z ~ N(0, 1)` with an `nodes`-point Gauss-Hermite rule.
pub fn normal_expectation(f: impl Fn(f64) -> f64, nodes: usize) -> f64 {
    let (x, w) = gauss_hermite(nodes);
    let scale = std::f64::consts::PI.sqrt();
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| wi * f(std::f64::consts::SQRT_2 * xi))
        .sum::<f64>()
        / scale
}

/// True marginal prevalence ratio with the confounder integrated over N(0, 1).
pub fn true_marginal_pr_with(coeffs: &DgpCoefficients, nodes: usize) -> f64 {
    let exposed = normal_expectation(|z| coeffs.prevalence(1.0, z), nodes);
    let unexposed = normal_expectation(|z| coeffs.prevalence(0.0, z), nodes);
    exposed / unexposed
}

pub fn true_marginal_pr(coeffs: &DgpCoefficients) -> f64 {
    true_marginal_pr_with(coeffs, QUADRATURE_NODES)
}

fn spec() -> ModelSpec {
    ModelSpec::new("y", "x", &["z"])
}

fn simulate_with(
    cfg: &ToyConfig,
    coeffs: &DgpCoefficients,
    rng: &mut impl RngCore,
) -> Result<Dataset> {
    let mut y = Vec::with_capacity(cfg.n);
    let mut x = Vec::with_capacity(cfg.n);
    let mut z = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let xi = if open_unit(rng) < cfg.p_exposure {
            1.0
        } else {
            0.0
        };
        let zi = normal_quantile(open_unit(rng));
        let yi = if open_unit(rng) < coeffs.prevalence(xi, zi) {
            1.0
        } else {
            0.0
        };
        x.push(xi);
        z.push(zi);
        y.push(yi);
    }
    Dataset::from_columns(spec(), y, vec![x, z])
}

/// Draws one toy dataset (stream 0 of `cfg.seed`).
pub fn simulate_toy(cfg: &ToyConfig) -> Result<Dataset> {
    let coeffs = dgp_coefficients(cfg)?;
    simulate_with(cfg, &coeffs, &mut replicate_rng(cfg.seed, 0))
}

/// Runs a single study method on a dataset.
pub fn run_method(method: Method, ds: &Dataset, level: f64) -> Result<PrEstimate> {
    match method {
        Method::RobustPoisson => robust_poisson_pr(ds, level),
        Method::LogBinomial => log_binomial_pr(ds, level),
        Method::Schouten => schouten_pr(ds, level),
        Method::Por | Method::Cpr | Method::Mpr => {
            let fit = fit_glm(ds, FamilyLink::BinomialLogit)?;
            match method {
                Method::Por => prevalence_odds_ratio(&fit, level),
                Method::Cpr => conditional_pr(&fit, ds, level),
                _ => marginal_pr(&fit, ds, level),
            }
        }
        Method::MantelHaenszel | Method::Crude => Err(Error::InvalidArgument(format!(
            "{method} is not available in the toy study (continuous confounder)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// The target this method's interval is scored against.
    pub truth: f64,
    pub estimate: std::result::Result<IntervalEstimate, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    /// Weighted mean of the confounder in this replicate.
    pub mean_z: f64,
    pub true_cpr: f64,
    pub outcomes: Vec<MethodOutcome>,
}

impl ReplicateRecord {
    pub fn point(&self, method: Method) -> Option<f64> {
        self.outcomes
            .iter()
            .find(|o| o.method == method)
            .and_then(|o| o.estimate.as_ref().ok())
            .map(|e| e.point)
    }
}

/// Runs every method on replicate `index`.
pub fn run_replicate(
    cfg: &ToyConfig,
    coeffs: &DgpCoefficients,
    index: usize,
    methods: &[Method],
    level: f64,
    true_mpr: f64,
) -> Result<ReplicateRecord> {
    let mut rng = replicate_rng(cfg.seed, index as u64);
    let ds = simulate_with(cfg, coeffs, &mut rng)?;
    let mean_z = covariate_means(&ds)[EXPOSURE_COLUMN + 1];
    let true_cpr = true_conditional_pr(coeffs, mean_z);
    let outcomes = methods
        .iter()
        .map(|&method| MethodOutcome {
            method,
            truth: match method {
                Method::Cpr => true_cpr,
                Method::Por => coeffs.exposure.exp(),
                _ => true_mpr,
            },
            estimate: run_method(method, &ds, level)
                .map(|e| e.interval)
                .map_err(|e| e.to_string()),
        })
        .collect();
    Ok(ReplicateRecord {
        index,
        mean_z,
        true_cpr,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Average target value across replicates.
    pub truth: f64,
    pub mean_estimate: f64,
    pub empirical_se: f64,
    pub mean_ci_width: f64,
    pub coverage: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub coefficients: DgpCoefficients,
    pub cpr_at_z0: f64,
    /// True CPR at each replicate's mean confounder, averaged over replicates.
    pub mean_cpr_at_mean_z: f64,
    pub mpr: f64,
    pub odds_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: ToyConfig,
    pub reps: usize,
    pub level: f64,
    pub truth: Truth,
    pub methods: Vec<MethodSummary>,
}

/// A study's summary together with its per-replicate records.
#[derive(Debug, Clone)]
pub struct StudyRun {
    pub report: StudyReport,
    pub replicates: Vec<ReplicateRecord>,
}

fn check_study_methods(methods: &[Method]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    if let Some(m) = methods.iter().find(|m| !STUDY_METHODS.contains(m)) {
        return Err(Error::InvalidArgument(format!(
            "{m} is not available in the toy study (continuous confounder)"
        )));
    }
    Ok(())
}

pub fn run_study(cfg: &ToyConfig, reps: usize, methods: &[Method], level: f64) -> Result<StudyRun> {
    if reps < MIN_STUDY_REPS {
        return Err(Error::InvalidArgument(format!(
            "a replication study needs at least {MIN_STUDY_REPS} replicates, got {reps}"
        )));
    }
    check_level(level)?;
    check_study_methods(methods)?;
    let coeffs = dgp_coefficients(cfg)?;
    let true_mpr = true_marginal_pr(&coeffs);

    let replicates: Vec<ReplicateRecord> = (0..reps)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &coeffs, r, methods, level, true_mpr))
        .collect::<Result<_>>()?;

    let summaries = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| summarize(method, replicates.iter().map(|r| &r.outcomes[k])))
        .collect();
    let mean_cpr = replicates.iter().map(|r| r.true_cpr).sum::<f64>() / reps as f64;

    let report = StudyReport {
        config: cfg.clone(),
        reps,
        level,
        truth: Truth {
            coefficients: coeffs,
            cpr_at_z0: true_conditional_pr(&coeffs, 0.0),
            mean_cpr_at_mean_z: mean_cpr,
            mpr: true_mpr,
            odds_ratio: coeffs.exposure.exp(),
        },
        methods: summaries,
    };
    Ok(StudyRun { report, replicates })
}

/// Simulates `reps` toy datasets and scores every method's estimates and
/// intervals against the analytic truth.
pub fn replication_study(
    cfg: &ToyConfig,
    reps: usize,
    methods: &[Method],
    level: f64,
) -> Result<StudyReport> {
    run_study(cfg, reps, methods, level).map(|run| run.report)
}

fn summarize<'a>(
    method: Method,
    outcomes: impl Iterator<Item = &'a MethodOutcome>,
) -> MethodSummary {
    let mut points = Vec::new();
    let mut widths = 0.0;
    let mut covered = 0usize;
    let mut truth_sum = 0.0;
    let mut failures = 0usize;
    let mut total = 0usize;
    for o in outcomes {
        total += 1;
        truth_sum += o.truth;
        match &o.estimate {
            Ok(ci) => {
                points.push(ci.point);
                widths += ci.width();
                if ci.contains(o.truth) {
                    covered += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let k = points.len() as f64;
    let mean = if points.is_empty() {
        f64::NAN
    } else {
        points.iter().sum::<f64>() / k
    };
    let se = if points.len() > 1 {
        (points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    MethodSummary {
        method,
        truth: truth_sum / total.max(1) as f64,
        mean_estimate: mean,
        empirical_se: se,
        mean_ci_width: if points.is_empty() {
            f64::NAN
        } else {
            widths / k
        },
        coverage: if points.is_empty() {
            f64::NAN
        } else {
            covered as f64 / k
        },
        successes: points.len(),
        failures,
    }
}

impl StudyReport {
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let c = &self.truth.coefficients;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Replication study: {} replicates, n = {}, seed = {}, level = {}",
            self.reps, self.config.n, self.config.seed, self.level
        );
        let _ = writeln!(
            out,
            "DGP: logit P(y=1) = {:.5} + {:.5} x + {:.5} z",
            c.intercept, c.exposure, c.confounder
        );
        let _ = writeln!(
            out,
            "Truth: CPR(z=0) = {:.6}, mean CPR(z at mean) = {:.6}, MPR = {:.6}, OR = {:.6}",
            self.truth.cpr_at_z0,
            self.truth.mean_cpr_at_mean_z,
            self.truth.mpr,
            self.truth.odds_ratio
        );
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
            "method", "truth", "mean", "emp.SE", "width", "cover", "fail"
        );
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>6}",
                m.method.to_string(),
                m.truth,
                m.mean_estimate,
                m.empirical_se,
                m.mean_ci_width,
                m.coverage,
                m.failures
            );
        }
        out
    }
}
