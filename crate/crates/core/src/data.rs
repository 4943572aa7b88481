//! Study data: CSV ingestion, validation and the design matrix.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const INTERCEPT: &str = "(Intercept)";
/// Design-matrix column holding the exposure.
pub const EXPOSURE_COLUMN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyLink {
    BinomialLogit,
    BinomialLog,
    PoissonLog,
}

impl fmt::Display for FamilyLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyLink::BinomialLogit => "binomial-logit",
            FamilyLink::BinomialLog => "binomial-log",
            FamilyLink::PoissonLog => "poisson-log",
        })
    }
}

impl FromStr for FamilyLink {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial-logit" | "logit" | "logistic" => Ok(FamilyLink::BinomialLogit),
            "binomial-log" | "log-binomial" => Ok(FamilyLink::BinomialLog),
            "poisson-log" | "poisson" => Ok(FamilyLink::PoissonLog),
            other => Err(Error::InvalidArgument(format!(
                "unknown family/link `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: String,
    pub exposure: String,
    pub covariates: Vec<String>,
    pub family_link: FamilyLink,
    /// Optional column of prior weights; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

impl ModelSpec {
    pub fn new(
        outcome: impl Into<String>,
        exposure: impl Into<String>,
        covariates: &[&str],
    ) -> Self {
        Self {
            outcome: outcome.into(),
            exposure: exposure.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            family_link: FamilyLink::BinomialLogit,
            weights: None,
        }
    }

    pub fn with_family(mut self, family_link: FamilyLink) -> Self {
        self.family_link = family_link;
        self
    }

    pub fn with_weights(mut self, column: impl Into<String>) -> Self {
        self.weights = Some(column.into());
        self
    }

    /// Exposure followed by covariates, in design-matrix order.
    pub fn predictors(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.exposure.as_str()).chain(self.covariates.iter().map(String::as_str))
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.iter().any(|c| c == &self.exposure) {
            return Err(Error::InvalidArgument(format!(
                "exposure `{}` is also listed as a covariate",
                self.exposure
            )));
        }
        if self.predictors().any(|p| p == self.outcome) {
            return Err(Error::InvalidArgument(format!(
                "outcome `{}` is also used as a predictor",
                self.outcome
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.covariates {
            if !seen.insert(c) {
                return Err(Error::InvalidArgument(format!(
                    "covariate `{c}` listed twice"
                )));
            }
        }
        if let Some(w) = &self.weights {
            if w == &self.outcome || self.predictors().any(|p| p == w) {
                return Err(Error::InvalidArgument(format!(
                    "weights column `{w}` is also a model variable"
                )));
            }
        }
        Ok(())
    }
}

/// A validated, immutable analysis dataset.
///
/// Column 0 of `x` is the intercept, column 1 the exposure, and the
/// covariates follow in specification order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: ModelSpec,
    y: Vec<f64>,
    x: Matrix,
    column_names: Vec<String>,
    weights: Vec<f64>,
    dropped_rows: usize,
}

impl Dataset {
    /// Builds a dataset from an outcome and the exposure/covariate columns
    /// named in `spec`, with unit prior weights.
    pub fn from_columns(spec: ModelSpec, y: Vec<f64>, predictors: Vec<Vec<f64>>) -> Result<Self> {
        let n = y.len();
        Self::from_columns_weighted(spec, y, predictors, vec![1.0; n])
    }

    pub fn from_columns_weighted(
        spec: ModelSpec,
        y: Vec<f64>,
        predictors: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let n = y.len();
        let k = 1 + spec.covariates.len();
        if predictors.len() != k {
            return Err(Error::Dimension(format!(
                "spec names {k} predictors, got {} columns",
                predictors.len()
            )));
        }
        let mut columns = Vec::with_capacity(k + 1);
        columns.push(vec![1.0; n]);
        columns.extend(predictors);
        let x = Matrix::from_columns(&columns)?;
        if x.rows() != n {
            return Err(Error::Dimension(format!(
                "outcome has {n} rows, predictors have {}",
                x.rows()
            )));
        }
        Self::assemble(spec, y, x, weights, 0)
    }

    fn assemble(
        spec: ModelSpec,
        y: Vec<f64>,
        x: Matrix,
        weights: Vec<f64>,
        dropped_rows: usize,
    ) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(i) = y.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidOutcome {
                row: i + 1,
                value: y[i].to_string(),
            });
        }
        if weights.len() != y.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} rows",
                weights.len(),
                y.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior weight {} at row {} is not strictly positive",
                weights[i],
                i + 1
            )));
        }
        if let Some(v) = x.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite predictor value {v}"
            )));
        }
        let column_names = std::iter::once(INTERCEPT.to_string())
            .chain(spec.predictors().map(str::to_string))
            .collect();
        Ok(Self {
            spec,
            y,
            x,
            column_names,
            weights,
            dropped_rows,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Rows removed by complete-case filtering when the data were loaded.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn is_binary_column(&self, j: usize) -> bool {
        (0..self.n()).all(|i| {
            let v = self.x[(i, j)];
            v == 0.0 || v == 1.0
        })
    }

    pub fn event_count(&self) -> usize {
        self.y.iter().filter(|v| **v == 1.0).count()
    }

    /// Copy of the dataset with design column `j` overwritten by `value`.
    pub fn with_column_value(&self, j: usize, value: f64) -> Dataset {
        let mut out = self.clone();
        out.x.set_column(j, value);
        out
    }

    /// Builds a new dataset from rows of this one (rows may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let p = self.x.cols();
        let mut data = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            data.extend_from_slice(self.x.row(i));
        }
        let x = Matrix::from_row_major(rows.len(), p, data)?;
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let weights = rows.iter().map(|&i| self.weights[i]).collect();
        Self::assemble(self.spec.clone(), y, x, weights, self.dropped_rows)
    }

    /// Replaces the outcome vector (used by data-expansion estimators).
    pub(crate) fn with_rows(&self, y: Vec<f64>, x: Matrix, weights: Vec<f64>) -> Result<Dataset> {
        Self::assemble(self.spec.clone(), y, x, weights, self.dropped_rows)
    }

    /// Writes outcome, predictors and the prior weights as CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let weight_name = self.spec.weights.clone().unwrap_or_else(|| "weight".into());
        let mut header = vec![self.spec.outcome.clone()];
        header.extend(self.column_names[1..].iter().cloned());
        header.push(weight_name);
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string()];
            rec.extend(self.x.row(i)[1..].iter().map(f64::to_string));
            rec.push(self.weights[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a dataset, dropping rows with a missing value in any referenced
/// column.
pub fn load_csv(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    read_dataset(reader, spec)
}

pub fn read_dataset<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    spec: &ModelSpec,
) -> Result<Dataset> {
    spec.validate()?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let outcome_idx = find(&spec.outcome)?;
    let predictor_idx: Vec<usize> = spec.predictors().map(find).collect::<Result<_>>()?;
    let weight_idx = spec.weights.as_deref().map(find).transpose()?;
    let predictor_names: Vec<&str> = spec.predictors().collect();

    let p = predictor_idx.len() + 1;
    let mut y = Vec::new();
    let mut data = Vec::new();
    let mut weights = Vec::new();
    let mut dropped = 0;
    let mut row_values = Vec::with_capacity(p);

    for (record_no, record) in reader.records().enumerate() {
        let record = record?;
        let row = record_no + 1;
        let field = |idx: usize| record.get(idx).map(str::trim).unwrap_or("");

        let missing = std::iter::once(outcome_idx)
            .chain(predictor_idx.iter().copied())
            .chain(weight_idx)
            .any(|idx| field(idx).is_empty());
        if missing {
            dropped += 1;
            continue;
        }

        let raw_y = field(outcome_idx);
        let yv = match raw_y.parse::<f64>() {
            Ok(v) if v == 0.0 || v == 1.0 => v,
            _ => {
                return Err(Error::InvalidOutcome {
                    row,
                    value: raw_y.to_string(),
                })
            }
        };

        row_values.clear();
        row_values.push(1.0);
        for (&idx, name) in predictor_idx.iter().zip(&predictor_names) {
            row_values.push(parse_number(field(idx), row, name)?);
        }
        let wv = match (weight_idx, spec.weights.as_deref()) {
            (Some(idx), Some(name)) => parse_number(field(idx), row, name)?,
            _ => 1.0,
        };

        y.push(yv);
        data.extend_from_slice(&row_values);
        weights.push(wv);
    }

    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = Matrix::from_row_major(y.len(), p, data)?;
    Dataset::assemble(spec.clone(), y, x, weights, dropped)
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Copy of `ds` with the exposure column set to `value` everywhere.
pub fn set_exposure_value(ds: &Dataset, value: f64) -> Dataset {
    ds.with_column_value(EXPOSURE_COLUMN, value)
}

/// Prior-weighted mean of every design-matrix column; entry 0 is the
/// intercept and therefore exactly 1.
pub fn covariate_means(ds: &Dataset) -> Vec<f64> {
    let total: f64 = ds.weights().iter().sum();
    let p = ds.x().cols();
    let mut means = vec![0.0; p];
    for (i, w) in ds.weights().iter().enumerate() {
        for (m, v) in means.iter_mut().zip(ds.x().row(i)) {
            *m += w * v;
        }
    }
    for m in &mut means {
        *m /= total;
    }
    means[0] = 1.0;
    means
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn spec() -> ModelSpec {
        ModelSpec::new("y", "x", &["z"])
    }

    #[test]
    fn loads_small_file() {
        let f = write_tmp("y,x,z,other\n1,0,1,a\n0,1,0,b\n1,1,1,c\n");
        let ds = load_csv(f.path(), &spec()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.x().cols(), 3);
        assert_eq!(ds.column_names(), &["(Intercept)", "x", "z"]);
        assert_eq!(ds.x().column(0), vec![1.0; 3]);
        assert_eq!(ds.x().column(1), vec![0.0, 1.0, 1.0]);
        assert_eq!(ds.y(), &[1.0, 0.0, 1.0]);
        assert_eq!(ds.weights(), &[1.0; 3]);
        assert_eq!(ds.dropped_rows(), 0);
    }

    #[test]
    fn drops_incomplete_rows() {
        let f = write_tmp("y,x,z\n1,0,1\n0,1,\n1,1,2.5\n");
        let ds = load_csv(f.path(), &spec()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.dropped_rows(), 1);
    }

    #[test]
    fn missing_value_in_unreferenced_column_is_kept() {
        let f = write_tmp("y,x,z,w\n1,0,1,\n0,1,0,3\n");
        let ds = load_csv(f.path(), &spec()).unwrap();
        assert_eq!(ds.n(), 2);
    }

    #[test]
    fn bad_outcome_reports_row() {
        let f = write_tmp("y,x,z\n1,0,1\n2,1,0\n");
        match load_csv(f.path(), &spec()) {
            Err(Error::InvalidOutcome { row, value }) => {
                assert_eq!(row, 2);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let f = write_tmp("y,x\n1,0\n");
        match load_csv(f.path(), &spec()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_rows_incomplete_is_an_error() {
        let f = write_tmp("y,x,z\n1,,1\n,1,0\n");
        assert!(matches!(
            load_csv(f.path(), &spec()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new("y", "x", &["x"]).validate().is_err());
        assert!(ModelSpec::new("y", "x", &["y"]).validate().is_err());
        assert!(ModelSpec::new("x", "x", &[]).validate().is_err());
        assert!(ModelSpec::new("y", "x", &["z", "z"]).validate().is_err());
        assert!(spec().validate().is_ok());
    }

    #[test]
    fn exposure_overwrite() {
        let ds =
            Dataset::from_columns(spec(), vec![1.0, 0.0], vec![vec![0.0, 1.0], vec![3.0, 4.0]])
                .unwrap();
        let ones = set_exposure_value(&ds, 1.0);
        assert_eq!(ones.x().column(1), vec![1.0, 1.0]);
        let zeros = set_exposure_value(&ds, 0.0);
        assert_eq!(zeros.x().column(1), vec![0.0, 0.0]);
        assert_eq!(set_exposure_value(&ones, 0.0), zeros);
        // input untouched, covariates untouched
        assert_eq!(ds.x().column(1), vec![0.0, 1.0]);
        assert_eq!(ones.x().column(2), vec![3.0, 4.0]);
    }

    #[test]
    fn means_unweighted_and_weighted() {
        let ds = Dataset::from_columns(
            spec(),
            vec![0.0, 1.0, 0.0],
            vec![vec![0.0, 1.0, 1.0], vec![0.0, 2.0, 4.0]],
        )
        .unwrap();
        let m = covariate_means(&ds);
        assert_eq!(m[0], 1.0);
        assert!((m[2] - 2.0).abs() < 1e-15);

        let ds = Dataset::from_columns_weighted(
            spec(),
            vec![0.0, 1.0],
            vec![vec![0.0, 1.0], vec![0.0, 4.0]],
            vec![1.0, 3.0],
        )
        .unwrap();
        let m = covariate_means(&ds);
        assert_eq!(m[0], 1.0);
        assert!((m[2] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let r = Dataset::from_columns_weighted(
            spec(),
            vec![0.0, 1.0],
            vec![vec![0.0, 1.0], vec![0.0, 4.0]],
            vec![1.0, 0.0],
        );
        assert!(r.is_err());
    }

    fn digest(ds: &Dataset) -> Vec<u64> {
        ds.x()
            .as_slice()
            .iter()
            .chain(ds.y())
            .chain(ds.weights())
            .map(|v| v.to_bits())
            .collect()
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            rows in prop::collection::vec(
                (0u8..2, 0u8..2, -1e6f64..1e6, 0.01f64..50.0), 1..40)
        ) {
            let spec = spec().with_weights("w");
            let ds = Dataset::from_columns_weighted(
                spec.clone(),
                rows.iter().map(|r| r.0 as f64).collect(),
                vec![
                    rows.iter().map(|r| r.1 as f64).collect(),
                    rows.iter().map(|r| r.2).collect(),
                ],
                rows.iter().map(|r| r.3).collect(),
            ).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            ds.write_csv(f.path()).unwrap();
            let back = load_csv(f.path(), &spec).unwrap();
            prop_assert_eq!(back.y(), ds.y());
            prop_assert_eq!(back.x(), ds.x());
            prop_assert_eq!(back.weights(), ds.weights());
        }

        #[test]
        fn exposure_overwrite_never_mutates_input(
            xs in prop::collection::vec(0u8..2, 1..20), value in -3.0f64..3.0
        ) {
            let n = xs.len();
            let ds = Dataset::from_columns(
                spec(),
                vec![0.0; n],
                vec![xs.iter().map(|v| *v as f64).collect(), (0..n).map(|i| i as f64).collect()],
            ).unwrap();
            let before = digest(&ds);
            let _ = set_exposure_value(&ds, value);
            prop_assert_eq!(digest(&ds), before);
        }
    }
}
