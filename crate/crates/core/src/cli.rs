//! Command-line front end.
//!
//! Three subcommands: `estimate` runs the requested estimators on a CSV,
//! `simulate` runs the toy replication study, and `table` works from
//! stratified 2x2 counts. Estimator failures become status rows, so one
//! failing method never aborts the whole run.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::classical::{
    crude_pr, load_strata_csv, log_binomial_pr, mantel_haenszel_pr, robust_poisson_pr, schouten_pr,
    StratifiedTable,
};
use crate::data::{load_csv, Dataset, FamilyLink, ModelSpec, EXPOSURE_COLUMN};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, FitResult};
use crate::pr::{
    bootstrap_pr, conditional_pr_at, conditioning_point, marginal_pr_for,
    prevalence_odds_ratio_for, BootstrapTarget, Method, PrEstimate,
};
use crate::simulate::{run_study, ToyConfig, STUDY_METHODS};
use crate::variance::IntervalEstimate;

#[derive(Debug, Parser)]
#[command(
    name = "prevratio",
    version,
    about = "Adjusted prevalence ratios for binary outcomes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate prevalence ratios from a CSV of individual records.
    Estimate(EstimateArgs),
    /// Run the toy replication study.
    Simulate(SimulateArgs),
    /// Estimate prevalence ratios from stratified 2x2 counts.
    Table(TableArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Tsv,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Methods to run, comma-separated (poisson, logbinomial, por, cpr, mpr,
    /// schouten, mh, crude) or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub methods: Vec<String>,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub outcome: String,
    #[arg(long)]
    pub exposure: String,
    /// Adjustment covariates, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Column of non-negative prior weights.
    #[arg(long)]
    pub weights: Option<String>,
    /// Bootstrap replicates for CPR and MPR percentile intervals (0 = off).
    #[arg(long, default_value_t = 0)]
    pub boot: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Conditioning values for CPR as name=value pairs; other covariates
    /// stay at their means.
    #[arg(long, value_delimiter = ',', value_parser = parse_assignment)]
    pub at: Vec<(String, f64)>,
    /// Report POR, CPR and MPR for every predictor, not only the exposure.
    #[arg(long)]
    pub all_predictors: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub p_exposure: f64,
    /// Prevalence among the unexposed at z = 0.
    #[arg(long, default_value_t = 0.20)]
    pub baseline: f64,
    /// Prevalence ratio at z = 0.
    #[arg(long, default_value_t = 2.0)]
    pub pr: f64,
    /// Log-odds slope of the confounder.
    #[arg(long, default_value_t = 0.20)]
    pub beta_z: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// CSV with columns stratum,a,b,c,d (exposed cases, exposed non-cases,
    /// unexposed cases, unexposed non-cases).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_assignment(raw: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected name=value, got `{raw}`"))?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("`{value}` is not a number"))?;
    if !value.is_finite() {
        return Err(format!("`{raw}` is not finite"));
    }
    Ok((name.trim().to_string(), value))
}

/// Settings shared by every subcommand once flags are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub level: f64,
    pub format: Format,
}

impl RunConfig {
    fn resolve(args: &OutputArgs, all: &[Method]) -> Result<Self> {
        let mut methods = Vec::new();
        for key in &args.methods {
            let key = key.trim();
            if key.eq_ignore_ascii_case("all") {
                methods.extend_from_slice(all);
            } else if !key.is_empty() {
                methods.push(Method::from_key(key)?);
            }
        }
        let mut seen = Vec::new();
        methods.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(*m);
            fresh
        });
        let cfg = Self {
            methods,
            level: args.level,
            format: args.format,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.5 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "level {} must lie in (0.5, 1)",
                self.level
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods requested".into()));
        }
        Ok(())
    }
}

/// One line of an estimate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub label: String,
    pub term: String,
    pub estimate: Option<IntervalEstimate>,
    /// Failure message; `None` when the estimate is available.
    pub error: Option<String>,
    pub notes: Vec<String>,
}

impl ReportRow {
    fn from_result(
        method: Method,
        label: impl Into<String>,
        term: &str,
        res: Result<PrEstimate>,
    ) -> Self {
        let label = label.into();
        match res {
            Ok(est) => Self {
                method,
                label,
                term: term.to_string(),
                estimate: Some(est.interval),
                error: None,
                notes: est.notes,
            },
            Err(e) => Self {
                method,
                label,
                term: term.to_string(),
                estimate: None,
                error: Some(e.to_string()),
                notes: Vec::new(),
            },
        }
    }

    fn status(&self) -> String {
        match &self.error {
            None => "ok".into(),
            Some(e) => format!("failed: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub header: Vec<String>,
    pub level: f64,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn any_estimate(&self) -> bool {
        self.rows.iter().any(|r| r.estimate.is_some())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            let _ = writeln!(out, "{line}");
        }
        let ci = format!("{}% CI", fmt_level(self.level));
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([6])
            .max()
            .unwrap_or(6);
        let term_w = self
            .rows
            .iter()
            .map(|r| r.term.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let _ = writeln!(
            out,
            "{:<label_w$}  {:<term_w$}  {:>9}  {:>22}  {:>9}  status",
            "method", "term", "PR", ci, "SE"
        );
        let mut notes = Vec::new();
        for row in &self.rows {
            let (pr, interval, se) = match &row.estimate {
                Some(e) => (
                    format!("{:.3}", e.point),
                    format!("({:.3}, {:.3})", e.lower, e.upper),
                    format!("{:.3}", e.se),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:<label_w$}  {:<term_w$}  {:>9}  {:>22}  {:>9}  {}",
                row.label,
                row.term,
                pr,
                interval,
                se,
                row.status()
            );
            for note in &row.notes {
                notes.push(format!("{} [{}]: {}", row.label, row.term, note));
            }
        }
        if !notes.is_empty() {
            let _ = writeln!(out, "notes:");
            for n in notes {
                let _ = writeln!(out, "  {n}");
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tterm\tpr\tlower\tupper\tse\tlevel\tstatus\tnotes\n");
        for row in &self.rows {
            let nums = match &row.estimate {
                Some(e) => format!(
                    "{}\t{}\t{}\t{}\t{}",
                    e.point, e.lower, e.upper, e.se, e.level
                ),
                None => format!("\t\t\t\t{}", self.level),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                tsv_field(&row.label),
                tsv_field(&row.term),
                nums,
                tsv_field(&row.status()),
                tsv_field(&row.notes.join("; "))
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Text => Ok(self.to_text()),
            Format::Json => self.to_json(),
            Format::Tsv => Ok(self.to_tsv()),
        }
    }
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n'], " ")
}

fn fmt_level(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round())
    } else {
        format!("{pct}")
    }
}

/// Rendered output of a subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    /// Diagnostics for stderr.
    pub diagnostics: Vec<String>,
    /// Whether at least one estimate was produced.
    pub success: bool,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Table(args) => cmd_table(args),
    }
}

fn finish(report: Report, format: Format) -> Result<Outcome> {
    let diagnostics = report
        .rows
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| format!("{} [{}]: {e}", r.label, r.term))
        })
        .collect();
    Ok(Outcome {
        stdout: report.render(format)?,
        diagnostics,
        success: report.any_estimate(),
    })
}

struct LogisticFit<'a> {
    ds: &'a Dataset,
    fit: std::result::Result<FitResult, String>,
}

impl LogisticFit<'_> {
    fn with(&self, f: impl FnOnce(&FitResult) -> Result<PrEstimate>) -> Result<PrEstimate> {
        match &self.fit {
            Ok(fit) => f(fit),
            Err(e) => Err(Error::InvalidArgument(format!("logistic fit failed: {e}"))),
        }
    }
}

/// Runs `methods` on `ds`, one row per method and term. `table` supplies
/// the strata for MH and crude rows when they are not derived from `ds`.
fn estimate_rows(
    ds: &Dataset,
    methods: &[Method],
    level: f64,
    at: &[(String, f64)],
    all_predictors: bool,
    table: Option<&StratifiedTable>,
) -> Vec<ReportRow> {
    let exposure = ds.column_names()[EXPOSURE_COLUMN].clone();
    let logistic = LogisticFit {
        ds,
        fit: fit_glm(ds, FamilyLink::BinomialLogit).map_err(|e| e.to_string()),
    };
    let terms: Vec<usize> = if all_predictors {
        (EXPOSURE_COLUMN..ds.x().cols()).collect()
    } else {
        vec![EXPOSURE_COLUMN]
    };
    let strata = || match table {
        Some(t) => Ok(t.clone()),
        None => StratifiedTable::from_dataset(ds),
    };
    let mut rows = Vec::new();
    for &method in methods {
        let label = method.to_string();
        match method {
            Method::RobustPoisson => rows.push(ReportRow::from_result(
                method,
                label,
                &exposure,
                robust_poisson_pr(ds, level),
            )),
            Method::LogBinomial => rows.push(ReportRow::from_result(
                method,
                label,
                &exposure,
                log_binomial_pr(ds, level),
            )),
            Method::Schouten => rows.push(ReportRow::from_result(
                method,
                label,
                &exposure,
                schouten_pr(ds, level),
            )),
            Method::MantelHaenszel => {
                let res = strata().and_then(|t| mantel_haenszel_pr(&t, level));
                rows.push(ReportRow::from_result(method, label, &exposure, res));
            }
            Method::Crude => {
                let res = strata().and_then(|t| crude_pr(&t, level));
                rows.push(ReportRow::from_result(method, label, &exposure, res));
            }
            Method::Por | Method::Cpr | Method::Mpr => {
                for &j in &terms {
                    let term = &ds.column_names()[j];
                    let res = logistic.with(|fit| match method {
                        Method::Por => prevalence_odds_ratio_for(fit, j, level),
                        Method::Mpr => marginal_pr_for(fit, logistic.ds, j, level),
                        _ => {
                            let own: Vec<(String, f64)> =
                                at.iter().filter(|(n, _)| n != term).cloned().collect();
                            let point = conditioning_point(logistic.ds, &own)?;
                            conditional_pr_at(fit, logistic.ds, j, &point, level)
                        }
                    });
                    rows.push(ReportRow::from_result(method, label.clone(), term, res));
                }
            }
        }
    }
    rows
}

fn spec_summary(spec: &ModelSpec) -> String {
    let covs = if spec.covariates.is_empty() {
        "none".to_string()
    } else {
        spec.covariates.join(", ")
    };
    format!(
        "outcome: {}  exposure: {}  covariates: {}",
        spec.outcome, spec.exposure, covs
    )
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<Outcome> {
    let cfg = RunConfig::resolve(&args.output, &STUDY_METHODS)?;
    let covs: Vec<&str> = args
        .covariates
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    let mut spec = ModelSpec::new(args.outcome.trim(), args.exposure.trim(), &covs);
    if let Some(w) = &args.weights {
        spec = spec.with_weights(w.trim());
    }
    let ds = load_csv(&args.input, &spec)?;
    // Surface bad conditioning names as a usage error rather than a row.
    conditioning_point(&ds, &args.at)?;

    let mut rows = estimate_rows(
        &ds,
        &cfg.methods,
        cfg.level,
        &args.at,
        args.all_predictors,
        None,
    );
    if args.boot > 0 {
        let exposure = ds.column_names()[EXPOSURE_COLUMN].clone();
        for (method, target) in [
            (Method::Cpr, BootstrapTarget::Conditional),
            (Method::Mpr, BootstrapTarget::Marginal),
        ] {
            if !cfg.methods.contains(&method) {
                continue;
            }
            let mut res = bootstrap_pr(&ds, target, args.boot, args.seed, cfg.level);
            if method == Method::Cpr && !args.at.is_empty() {
                res = res.map(|e| {
                    e.with_note("bootstrap conditions on covariate means, not --at values")
                });
            }
            rows.push(ReportRow::from_result(
                method,
                format!("{method} (bootstrap)"),
                &exposure,
                res,
            ));
        }
    }

    let mut header = vec![
        spec_summary(ds.spec()),
        format!(
            "rows used: {}  dropped (incomplete): {}  events: {}",
            ds.n(),
            ds.dropped_rows(),
            ds.event_count()
        ),
    ];
    if !args.at.is_empty() {
        let at: Vec<String> = args.at.iter().map(|(n, v)| format!("{n}={v}")).collect();
        header.push(format!("CPR conditioned at: {}", at.join(", ")));
    }
    let report = Report {
        header,
        level: cfg.level,
        rows,
    };
    finish(report, cfg.format)
}

/// Individual-level dataset equivalent to a stratified table, with one
/// indicator column per stratum after the first. Counts must be integers.
pub fn table_to_dataset(table: &StratifiedTable) -> Result<Dataset> {
    let strata = table.strata();
    let dummies: Vec<String> = strata[1..]
        .iter()
        .map(|s| format!("stratum={}", s.label))
        .collect();
    let names: Vec<&str> = dummies.iter().map(String::as_str).collect();
    let spec = ModelSpec::new("case", "exposed", &names);
    let mut y = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 1 + dummies.len()];
    for (k, s) in strata.iter().enumerate() {
        for (count, exposed, case) in [
            (s.a, 1.0, 1.0),
            (s.b, 1.0, 0.0),
            (s.c, 0.0, 1.0),
            (s.d, 0.0, 0.0),
        ] {
            if count.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "stratum `{}` has non-integer count {count}",
                    s.label
                )));
            }
            for _ in 0..count as usize {
                y.push(case);
                cols[0].push(exposed);
                for (d, col) in cols[1..].iter_mut().enumerate() {
                    col.push(if d + 1 == k { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Dataset::from_columns(spec, y, cols)
}

pub fn cmd_table(args: &TableArgs) -> Result<Outcome> {
    let table_methods = [
        Method::Crude,
        Method::MantelHaenszel,
        Method::RobustPoisson,
        Method::LogBinomial,
        Method::Por,
        Method::Cpr,
        Method::Mpr,
        Method::Schouten,
    ];
    let cfg = RunConfig::resolve(&args.output, &table_methods)?;
    let table = load_strata_csv(&args.input)?;
    let ds = table_to_dataset(&table)?;
    let mut rows = estimate_rows(&ds, &cfg.methods, cfg.level, &[], false, Some(&table));
    for row in &mut rows {
        row.term = "exposure".into();
    }
    let labels: Vec<&str> = table.strata().iter().map(|s| s.label.as_str()).collect();
    let report = Report {
        header: vec![
            format!("strata: {} ({})", labels.len(), labels.join(", ")),
            format!("individuals: {}  cases: {}", ds.n(), ds.event_count()),
        ],
        level: cfg.level,
        rows,
    };
    finish(report, cfg.format)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let cfg = RunConfig::resolve(&args.output, &STUDY_METHODS)?;
    let toy = ToyConfig {
        n: args.n,
        p_exposure: args.p_exposure,
        baseline_prevalence: args.baseline,
        pr_at_z0: args.pr,
        beta_z: args.beta_z,
        seed: args.seed,
    };
    let run = run_study(&toy, args.reps, &cfg.methods, cfg.level)?;
    let report = run.report;
    let stdout = match cfg.format {
        Format::Text => report.to_text(),
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Tsv => {
            let mut out = String::from("method\ttruth\tmean_estimate\tempirical_se\tmean_ci_width\tcoverage\tsuccesses\tfailures\n");
            for m in &report.methods {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    m.method,
                    m.truth,
                    m.mean_estimate,
                    m.empirical_se,
                    m.mean_ci_width,
                    m.coverage,
                    m.successes,
                    m.failures
                );
            }
            out
        }
    };
    let diagnostics = report
        .methods
        .iter()
        .filter(|m| m.failures > 0)
        .map(|m| {
            format!(
                "{}: {} of {} replicates failed",
                m.method, m.failures, report.reps
            )
        })
        .collect();
    Ok(Outcome {
        stdout,
        diagnostics,
        success: report.methods.iter().any(|m| m.successes > 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::Stratum;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("prevratio").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(parse_assignment("z=1.5").unwrap(), ("z".into(), 1.5));
        assert!(parse_assignment("z").is_err());
        assert!(parse_assignment("z=abc").is_err());
        assert!(parse_assignment("z=inf").is_err());
    }

    #[test]
    fn method_resolution() {
        let cli = parse(&["table", "--input", "t.csv", "--methods", "mh,all,crude"]);
        let Command::Table(args) = &cli.command else {
            panic!()
        };
        let cfg = RunConfig::resolve(&args.output, &STUDY_METHODS).unwrap();
        assert_eq!(cfg.methods[0], Method::MantelHaenszel);
        assert_eq!(cfg.methods.len(), 8);

        let cli = parse(&["table", "--input", "t.csv", "--methods", "bogus"]);
        let Command::Table(args) = &cli.command else {
            panic!()
        };
        assert!(RunConfig::resolve(&args.output, &STUDY_METHODS).is_err());
    }

    #[test]
    fn level_bounds() {
        for level in ["0.5", "1", "1.5"] {
            let cli = parse(&["table", "--input", "t.csv", "--level", level]);
            let Command::Table(args) = &cli.command else {
                panic!()
            };
            assert!(
                RunConfig::resolve(&args.output, &STUDY_METHODS).is_err(),
                "{level}"
            );
        }
    }

    #[test]
    fn table_expansion_counts() {
        let table = StratifiedTable::new(vec![
            Stratum::new("low", 3.0, 7.0, 2.0, 8.0),
            Stratum::new("high", 5.0, 5.0, 1.0, 9.0),
        ])
        .unwrap();
        let ds = table_to_dataset(&table).unwrap();
        assert_eq!(ds.n(), 40);
        assert_eq!(ds.event_count(), 11);
        assert_eq!(
            ds.column_names(),
            &["(Intercept)", "exposed", "stratum=high"]
        );
        let back = StratifiedTable::from_dataset(&ds).unwrap();
        let s = &back.strata()[1];
        assert_eq!((s.a, s.b, s.c, s.d), (5.0, 5.0, 1.0, 9.0));
    }

    #[test]
    fn fractional_counts_are_rejected() {
        let table = StratifiedTable::new(vec![Stratum::new("s", 1.5, 2.0, 3.0, 4.0)]).unwrap();
        assert!(table_to_dataset(&table).is_err());
    }

    #[test]
    fn text_uses_three_decimals_and_marks_failures() {
        let report = Report {
            header: vec!["h".into()],
            level: 0.95,
            rows: vec![
                ReportRow {
                    method: Method::Cpr,
                    label: "CPR".into(),
                    term: "x".into(),
                    estimate: Some(IntervalEstimate {
                        point: 1.95612,
                        se: 0.2,
                        lower: 1.5781,
                        upper: 2.42549,
                        level: 0.95,
                    }),
                    error: None,
                    notes: vec![],
                },
                ReportRow {
                    method: Method::LogBinomial,
                    label: "Log-binomial".into(),
                    term: "x".into(),
                    estimate: None,
                    error: Some("did not converge".into()),
                    notes: vec![],
                },
            ],
        };
        let text = report.to_text();
        assert!(text.contains("1.956"));
        assert!(text.contains("(1.578, 2.425)"));
        assert!(text.contains("failed: did not converge"));
        assert!(text.contains("95% CI"));
        assert!(report.any_estimate());
    }
}
