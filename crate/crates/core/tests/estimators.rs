use std::io::Write;

use prevratio::classical::{
    crude_pr, log_binomial_pr, mantel_haenszel_pr, robust_poisson_pr, schouten_pr, StratifiedTable,
};
use prevratio::pr::{
    bootstrap_pr, conditional_pr, conditional_pr_at, conditioning_point, marginal_pr,
    prevalence_odds_ratio, BootstrapTarget,
};
use prevratio::simulate::{dgp_coefficients, simulate_toy, true_conditional_pr, ToyConfig};
use prevratio::{fit_glm, load_csv, Dataset, FamilyLink, ModelSpec};

fn toy(n: usize, seed: u64) -> Dataset {
    simulate_toy(&ToyConfig {
        n,
        seed,
        ..ToyConfig::default()
    })
    .unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn toy_estimates_line_up() {
    let ds = toy(1000, 7);
    let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
    let mpr = marginal_pr(&fit, &ds, 0.95).unwrap();
    let cpr = conditional_pr(&fit, &ds, 0.95).unwrap();
    let por = prevalence_odds_ratio(&fit, 0.95).unwrap();
    let lb = log_binomial_pr(&ds, 0.95).unwrap();
    let rp = robust_poisson_pr(&ds, 0.95).unwrap();
    let sc = schouten_pr(&ds, 0.95).unwrap();
    for est in [&cpr, &lb, &rp, &sc] {
        assert!((est.point() - mpr.point()).abs() < 0.1, "{:?}", est);
    }
    assert!((sc.point() - lb.point()).abs() < 0.05);
    assert!(por.point() > cpr.point());
    assert!(!sc.notes.is_empty());
}

#[test]
fn frequency_weights_match_duplicated_rows() {
    let ds = toy(300, 3);
    let rows: Vec<usize> = (0..ds.n())
        .flat_map(|i| std::iter::repeat_n(i, 1 + i % 3))
        .collect();
    let duplicated = ds.select_rows(&rows).unwrap();

    let x = ds.x();
    let weighted = Dataset::from_columns_weighted(
        ModelSpec::new("y", "x", &["z"]).with_weights("w"),
        ds.y().to_vec(),
        vec![
            (0..ds.n()).map(|i| x[(i, 1)]).collect(),
            (0..ds.n()).map(|i| x[(i, 2)]).collect(),
        ],
        (0..ds.n()).map(|i| (1 + i % 3) as f64).collect(),
    )
    .unwrap();

    let fw = fit_glm(&weighted, FamilyLink::BinomialLogit).unwrap();
    let fd = fit_glm(&duplicated, FamilyLink::BinomialLogit).unwrap();
    for (a, b) in [
        (
            marginal_pr(&fw, &weighted, 0.95).unwrap(),
            marginal_pr(&fd, &duplicated, 0.95).unwrap(),
        ),
        (
            conditional_pr(&fw, &weighted, 0.95).unwrap(),
            conditional_pr(&fd, &duplicated, 0.95).unwrap(),
        ),
        (
            log_binomial_pr(&weighted, 0.95).unwrap(),
            log_binomial_pr(&duplicated, 0.95).unwrap(),
        ),
    ] {
        assert!(close(a.point(), b.point(), 1e-8), "{a:?} vs {b:?}");
        assert!(close(a.interval.se, b.interval.se, 1e-6), "{a:?} vs {b:?}");
    }
    let rw = robust_poisson_pr(&weighted, 0.95).unwrap();
    let rd = robust_poisson_pr(&duplicated, 0.95).unwrap();
    assert!(close(rw.point(), rd.point(), 1e-8));
}

#[test]
fn doubling_the_data_keeps_points_and_shrinks_errors() {
    let ds = toy(400, 9);
    let rows: Vec<usize> = (0..ds.n()).chain(0..ds.n()).collect();
    let doubled = ds.select_rows(&rows).unwrap();
    let f1 = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
    let f2 = fit_glm(&doubled, FamilyLink::BinomialLogit).unwrap();
    let pairs = [
        (
            marginal_pr(&f1, &ds, 0.95).unwrap(),
            marginal_pr(&f2, &doubled, 0.95).unwrap(),
        ),
        (
            conditional_pr(&f1, &ds, 0.95).unwrap(),
            conditional_pr(&f2, &doubled, 0.95).unwrap(),
        ),
        (
            robust_poisson_pr(&ds, 0.95).unwrap(),
            robust_poisson_pr(&doubled, 0.95).unwrap(),
        ),
        (
            schouten_pr(&ds, 0.95).unwrap(),
            schouten_pr(&doubled, 0.95).unwrap(),
        ),
    ];
    for (a, b) in pairs {
        assert!(close(a.point(), b.point(), 1e-8), "{a:?} vs {b:?}");
        let ratio = b.interval.se / a.interval.se;
        assert!(
            (ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6,
            "{ratio}"
        );
    }
}

#[test]
fn conditioning_values_move_the_conditional_ratio() {
    let ds = toy(5000, 21);
    let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
    let truth = dgp_coefficients(&ToyConfig::default()).unwrap();
    let mut last = f64::INFINITY;
    for z in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let point = conditioning_point(&ds, &[("z".into(), z)]).unwrap();
        let est = conditional_pr_at(&fit, &ds, 1, &point, 0.95).unwrap();
        assert!(est.point() < last);
        last = est.point();
        assert!((est.point() - true_conditional_pr(&truth, z)).abs() < 0.3);
    }
    assert!(conditioning_point(&ds, &[("x".into(), 1.0)]).is_err());
    assert!(conditioning_point(&ds, &[("nope".into(), 1.0)]).is_err());
}

#[test]
fn binary_strata_agree_with_models() {
    // Ratios are close to 2 within strata; exposure is more common in the
    // high-prevalence stratum, so the crude ratio is confounded.
    let mut csv = String::from("y,x,s\n");
    for (s, a, b, c, d) in [(0, 10, 40, 20, 180), (1, 90, 110, 22, 78)] {
        for (count, x, y) in [(a, 1, 1), (b, 1, 0), (c, 0, 1), (d, 0, 0)] {
            for _ in 0..count {
                csv.push_str(&format!("{y},{x},{s}\n"));
            }
        }
    }
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(csv.as_bytes()).unwrap();
    let ds = load_csv(file.path(), &ModelSpec::new("y", "x", &["s"])).unwrap();
    let table = StratifiedTable::from_dataset(&ds).unwrap();
    let mh = mantel_haenszel_pr(&table, 0.95).unwrap();
    let crude = crude_pr(&table, 0.95).unwrap();
    let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
    let mpr = marginal_pr(&fit, &ds, 0.95).unwrap();
    let lb = log_binomial_pr(&ds, 0.95).unwrap();
    assert_eq!(table.strata().len(), 2);
    assert!((mh.point() - 2.02).abs() < 0.05, "{mh:?}");
    assert!((lb.point() - mh.point()).abs() < 0.05);
    assert!((mpr.point() - mh.point()).abs() < 0.1);
    assert!(crude.point() > 2.5, "{crude:?}");
}

#[test]
fn incomplete_rows_are_dropped_before_fitting() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "y,x,z").unwrap();
    for i in 0..200 {
        let x = i % 2;
        let y = usize::from(i % 5 < 1 + x);
        let z = if i % 17 == 0 {
            String::new()
        } else {
            format!("{}", (i % 7) as f64 / 7.0)
        };
        writeln!(file, "{y},{x},{z}").unwrap();
    }
    let ds = load_csv(file.path(), &ModelSpec::new("y", "x", &["z"])).unwrap();
    assert_eq!(ds.dropped_rows(), 12);
    assert_eq!(ds.n(), 188);
    let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
    assert_eq!(fit.n_used, 188);
    assert!(marginal_pr(&fit, &ds, 0.95).unwrap().point() > 1.0);
}

#[test]
fn bootstrap_agrees_with_delta_method() {
    let ds = toy(1000, 13);
    let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
    let pairs = [
        (
            BootstrapTarget::Marginal,
            marginal_pr(&fit, &ds, 0.95).unwrap(),
        ),
        (
            BootstrapTarget::Conditional,
            conditional_pr(&fit, &ds, 0.95).unwrap(),
        ),
    ];
    for (target, delta) in pairs {
        let boot = bootstrap_pr(&ds, target, 400, 77, 0.95).unwrap();
        assert_eq!(boot.point(), delta.point());
        let (b, d) = (boot.interval, delta.interval);
        assert!(b.lower < d.upper && d.lower < b.upper, "{b:?} vs {d:?}");
        let ratio = b.width() / d.width();
        assert!(
            (0.8..=1.25).contains(&ratio),
            "{target:?}: width ratio {ratio}"
        );
    }
}
