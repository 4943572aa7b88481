//! Comparison estimators: crude and Mantel-Haenszel prevalence ratios from
//! 2×2×K tables, logistic regression on event-duplicated data, and the
//! log-binomial and robust Poisson regressions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FamilyLink, EXPOSURE_COLUMN};
use crate::error::{Error, Result};
use crate::glm::fit_glm;
use crate::matrix::Matrix;
use crate::pr::{attach_fit_notes, Method, PrEstimate};
use crate::variance::{check_level, ratio_from_log_scale, sandwich_vcov, wald_ci_log_scale};

pub const SCHOUTEN_CAVEAT: &str =
    "SE from sandwich variance on duplicated rows; duplicated rows are not independent";

/// One 2×2 stratum: `a`/`b` exposed cases/non-cases, `c`/`d` unexposed
/// cases/non-cases. Counts may be fractional when they come from weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Stratum {
    pub fn new(label: impl Into<String>, a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            label: label.into(),
            a,
            b,
            c,
            d,
        }
    }

    pub fn total(&self) -> f64 {
        self.a + self.b + self.c + self.d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTable {
    strata: Vec<Stratum>,
}

impl StratifiedTable {
    pub fn new(strata: Vec<Stratum>) -> Result<Self> {
        if strata.is_empty() {
            return Err(Error::InvalidArgument("table has no strata".into()));
        }
        for s in &strata {
            if [s.a, s.b, s.c, s.d]
                .iter()
                .any(|v| !(*v >= 0.0) || !v.is_finite())
            {
                return Err(Error::InvalidArgument(format!(
                    "stratum `{}` has a negative or non-finite count",
                    s.label
                )));
            }
            if !(s.total() > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "stratum `{}` is empty",
                    s.label
                )));
            }
        }
        Ok(Self { strata })
    }

    pub fn single(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Self::new(vec![Stratum::new("all", a, b, c, d)])
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    /// Sums all strata into one.
    pub fn collapsed(&self) -> Stratum {
        let mut it = self.strata.iter();
        let first = it.next().expect("table has at least one stratum");
        it.fold(
            Stratum::new("all", first.a, first.b, first.c, first.d),
            |mut acc, s| {
                acc.a += s.a;
                acc.b += s.b;
                acc.c += s.c;
                acc.d += s.d;
                acc
            },
        )
    }

    /// Cross-classifies a dataset by exposure within every combination of
    /// covariate values. Exposure and covariates must all be coded 0/1;
    /// prior weights become fractional counts.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let p = ds.x().cols();
        for j in EXPOSURE_COLUMN..p {
            if !ds.is_binary_column(j) {
                return Err(Error::InvalidArgument(format!(
                    "Mantel-Haenszel needs all-binary strata, but `{}` is not coded 0/1",
                    ds.column_names()[j]
                )));
            }
        }
        let mut cells: BTreeMap<Vec<u8>, [f64; 4]> = BTreeMap::new();
        for i in 0..ds.n() {
            let row = ds.x().row(i);
            let key: Vec<u8> = row[EXPOSURE_COLUMN + 1..]
                .iter()
                .map(|v| *v as u8)
                .collect();
            let exposed = row[EXPOSURE_COLUMN] == 1.0;
            let case = ds.y()[i] == 1.0;
            let slot = match (exposed, case) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            cells.entry(key).or_insert([0.0; 4])[slot] += ds.weights()[i];
        }
        let names = &ds.column_names()[EXPOSURE_COLUMN + 1..];
        let strata = cells
            .into_iter()
            .map(|(key, [a, b, c, d])| {
                let label = if key.is_empty() {
                    "all".to_string()
                } else {
                    names
                        .iter()
                        .zip(&key)
                        .map(|(n, v)| format!("{n}={v}"))
                        .collect::<Vec<_>>()
                        .join(",")
                };
                Stratum::new(label, a, b, c, d)
            })
            .collect();
        Self::new(strata)
    }
}

/// Reads a table from CSV with header `stratum,a,b,c,d`.
pub fn load_strata_csv(path: impl AsRef<Path>) -> Result<StratifiedTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (s, a, b, c, d) = (
        find("stratum")?,
        find("a")?,
        find("b")?,
        find("c")?,
        find("d")?,
    );
    let mut strata = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let num = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row: i + 1,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        strata.push(Stratum::new(
            record.get(s).unwrap_or("").trim(),
            num(a, "a")?,
            num(b, "b")?,
            num(c, "c")?,
            num(d, "d")?,
        ));
    }
    StratifiedTable::new(strata)
}

fn single_stratum_pr(s: &Stratum, method: Method, level: f64) -> Result<PrEstimate> {
    let exposed = s.a + s.b;
    let unexposed = s.c + s.d;
    if !(exposed > 0.0) || !(unexposed > 0.0) {
        return Err(Error::UndefinedRatio("an exposure group is empty".into()));
    }
    if s.c == 0.0 {
        return Err(Error::UndefinedRatio(
            "no cases among the unexposed; ratio is infinite".into(),
        ));
    }
    if s.a == 0.0 {
        return Err(Error::UndefinedRatio(
            "no cases among the exposed; log ratio is undefined".into(),
        ));
    }
    let pr = (s.a / exposed) / (s.c / unexposed);
    let log_se = (1.0 / s.a - 1.0 / exposed + 1.0 / s.c - 1.0 / unexposed)
        .max(0.0)
        .sqrt();
    let interval = wald_ci_log_scale(pr, pr * log_se, level)?;
    Ok(PrEstimate::new(method, "exposure", interval))
}

/// Crude prevalence ratio with the usual log-scale standard error; strata,
/// if several, are pooled first.
pub fn crude_pr(table: &StratifiedTable, level: f64) -> Result<PrEstimate> {
    single_stratum_pr(&table.collapsed(), Method::Crude, level)
}

/// Mantel-Haenszel prevalence ratio with the Greenland-Robins variance of
/// its logarithm.
pub fn mantel_haenszel_pr(table: &StratifiedTable, level: f64) -> Result<PrEstimate> {
    check_level(level)?;
    if let [only] = table.strata() {
        return single_stratum_pr(only, Method::MantelHaenszel, level);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut var_num = 0.0;
    for s in table.strata() {
        let t = s.total();
        let n1 = s.a + s.b;
        let n0 = s.c + s.d;
        num += s.a * n0 / t;
        den += s.c * n1 / t;
        var_num += (s.a + s.c) * n1 * n0 / (t * t) - s.a * s.c / t;
    }
    if !(num > 0.0) || !(den > 0.0) {
        return Err(Error::UndefinedRatio(
            "a Mantel-Haenszel weighted sum is zero".into(),
        ));
    }
    let pr = num / den;
    let log_se = (var_num / (num * den)).max(0.0).sqrt();
    let interval = wald_ci_log_scale(pr, pr * log_se, level)?;
    Ok(PrEstimate::new(
        Method::MantelHaenszel,
        "exposure",
        interval,
    ))
}

/// Appends a copy of every event row with its outcome set to 0.
pub fn schouten_expand(ds: &Dataset) -> Result<Dataset> {
    let events: Vec<usize> = (0..ds.n()).filter(|&i| ds.y()[i] == 1.0).collect();
    let p = ds.x().cols();
    let n = ds.n() + events.len();
    let mut y = ds.y().to_vec();
    let mut data = ds.x().as_slice().to_vec();
    let mut weights = ds.weights().to_vec();
    y.reserve(events.len());
    data.reserve(events.len() * p);
    for &i in &events {
        y.push(0.0);
        data.extend_from_slice(ds.x().row(i));
        weights.push(ds.weights()[i]);
    }
    ds.with_rows(y, Matrix::from_row_major(n, p, data)?, weights)
}

/// Prevalence ratio as the exponentiated exposure coefficient of a
/// logistic fit on event-duplicated data.
pub fn schouten_pr(ds: &Dataset, level: f64) -> Result<PrEstimate> {
    let expanded = schouten_expand(ds)?;
    let fit = fit_glm(&expanded, FamilyLink::BinomialLogit)?;
    let v = sandwich_vcov(&fit, &expanded)?;
    let j = EXPOSURE_COLUMN;
    let interval = ratio_from_log_scale(fit.beta[j], v[(j, j)].max(0.0).sqrt(), level)?;
    let mut est = PrEstimate::new(Method::Schouten, fit.column_names[j].clone(), interval)
        .with_note(SCHOUTEN_CAVEAT);
    attach_fit_notes(&mut est, &fit);
    Ok(est)
}

/// Log-binomial regression PR with model-based standard errors.
pub fn log_binomial_pr(ds: &Dataset, level: f64) -> Result<PrEstimate> {
    let fit = fit_glm(ds, FamilyLink::BinomialLog)?;
    let j = EXPOSURE_COLUMN;
    let interval = ratio_from_log_scale(fit.beta[j], fit.std_error(j), level)?;
    Ok(PrEstimate::new(
        Method::LogBinomial,
        fit.column_names[j].clone(),
        interval,
    ))
}

/// Poisson-log regression PR with HC0 sandwich standard errors.
pub fn robust_poisson_pr(ds: &Dataset, level: f64) -> Result<PrEstimate> {
    let fit = fit_glm(ds, FamilyLink::PoissonLog)?;
    let v = sandwich_vcov(&fit, ds)?;
    let j = EXPOSURE_COLUMN;
    let interval = ratio_from_log_scale(fit.beta[j], v[(j, j)].max(0.0).sqrt(), level)?;
    Ok(PrEstimate::new(
        Method::RobustPoisson,
        fit.column_names[j].clone(),
        interval,
    ))
}
