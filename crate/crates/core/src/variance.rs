//! Robust variance and ratio-scale Wald intervals.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{linkinv, FitResult};
use crate::matrix::{spd_inverse, symmetrize, weighted_cross_product, Matrix};

/// A ratio estimate with its standard error and confidence limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    /// Standard error on the ratio scale.
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "confidence level {level} must lie strictly between 0 and 1"
        )))
    }
}

/// Two-sided critical value `Φ⁻¹((1 + level) / 2)`.
pub fn critical_value(level: f64) -> Result<f64> {
    check_level(level)?;
    Ok(normal_quantile(0.5 * (1.0 + level)))
}

/// Standard normal quantile function.
///
/// Wichura's AS 241 (PPND16) rational approximation, accurate to about
/// 1e-16 relative over the open unit interval.
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_854_561e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        2.417_807_251_774_506_117_7e-1,
        2.272_384_498_926_918_458_33e-2,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        6.897_673_349_851_000_045_5e-1,
        1.481_039_764_274_800_745_9e-1,
        1.519_866_656_361_645_719_66e-2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        2.965_605_718_285_048_912_3e-1,
        2.653_218_952_657_612_309_3e-2,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_9e-1,
        1.369_298_809_227_358_053_1e-1,
        1.487_536_129_085_061_485_25e-2,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    fn ratio(num: &[f64; 8], den: &[f64; 8], x: f64) -> f64 {
        let n = num.iter().rev().fold(0.0, |acc, c| acc * x + c);
        let d = den.iter().rev().fold(0.0, |acc, c| acc * x + c);
        n / d
    }

    if p.is_nan() || p <= 0.0 || p >= 1.0 {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * ratio(&A, &B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let v = if r <= 5.0 {
        ratio(&C, &D, r - 1.6)
    } else {
        ratio(&E, &F, r - 5.0)
    };
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// Interval `point · exp(±z · se / point)`, where `se` is on the ratio
/// scale so that `se / point` is the delta-method SE of `log(point)`.
pub fn wald_ci_log_scale(point: f64, se: f64, level: f64) -> Result<IntervalEstimate> {
    if !(point > 0.0) || !point.is_finite() {
        return Err(Error::UndefinedRatio(format!(
            "ratio estimate {point} is not a finite positive number"
        )));
    }
    if !(se >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard error {se} is negative or NaN"
        )));
    }
    let z = critical_value(level)?;
    let half = z * se / point;
    Ok(IntervalEstimate {
        point,
        se,
        lower: point * (-half).exp(),
        upper: point * half.exp(),
        level,
    })
}

/// Interval for `exp(log_point)` from a log-scale standard error.
pub fn ratio_from_log_scale(log_point: f64, log_se: f64, level: f64) -> Result<IntervalEstimate> {
    let point = log_point.exp();
    wald_ci_log_scale(point, point * log_se, level)
}

/// HC0 sandwich covariance `B⁻¹ M B⁻¹` of the coefficients of `fit`.
///
/// `B = XᵀWX` is the model-based information at the optimum and
/// `M = Σ uᵢ uᵢᵀ` sums outer products of the per-row score contributions
/// `uᵢ = wᵢ (dμ/dη)/V(μ) (yᵢ - μᵢ) xᵢ`. For the canonical logit and
/// Poisson-log links the score factor is 1.
pub fn sandwich_vcov(fit: &FitResult, ds: &Dataset) -> Result<Matrix> {
    let x = ds.x();
    if x.cols() != fit.beta.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, model has {} coefficients",
            x.cols(),
            fit.beta.len()
        )));
    }
    let family = fit.family_link();
    let eta = x.mul_vec(&fit.beta)?;
    let mut bread_w = Vec::with_capacity(ds.n());
    let mut meat_w = Vec::with_capacity(ds.n());
    for (i, &e) in eta.iter().enumerate() {
        let mu = linkinv(family, e);
        let prior = ds.weights()[i];
        let (w, score) = match family {
            crate::data::FamilyLink::BinomialLogit => (mu * (1.0 - mu), 1.0),
            crate::data::FamilyLink::BinomialLog => (mu / (1.0 - mu), 1.0 / (1.0 - mu)),
            crate::data::FamilyLink::PoissonLog => (mu, 1.0),
        };
        let u = prior * score * (ds.y()[i] - mu);
        bread_w.push(prior * w);
        meat_w.push(u * u);
    }
    let bread_inv = spd_inverse(&weighted_cross_product(x, &bread_w)?)?;
    let meat = weighted_cross_product(x, &meat_w)?;
    let mut v = bread_inv.mul(&meat)?.mul(&bread_inv)?;
    symmetrize(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FamilyLink, ModelSpec};
    use crate::glm::fit_glm;
    use crate::matrix::Cholesky;
    use proptest::prelude::*;

    #[test]
    fn quantile_reference_values() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-13);
        assert!((normal_quantile(0.995) - 2.575_829_303_548_901).abs() < 1e-13);
        assert!((normal_quantile(0.5)).abs() < 1e-16);
        assert!((normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-11);
        assert_eq!(normal_quantile(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn quantile_is_antisymmetric() {
        for p in [0.001, 0.02, 0.3, 0.45] {
            assert!((normal_quantile(p) + normal_quantile(1.0 - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_interval() {
        for level in [0.5, 0.9, 0.99] {
            let ci = wald_ci_log_scale(1.0, 0.0, level).unwrap();
            assert_eq!((ci.lower, ci.upper), (1.0, 1.0));
        }
    }

    #[test]
    fn formula_evaluation() {
        let ci = wald_ci_log_scale(2.0, 0.4, 0.95).unwrap();
        let z = 1.959_963_984_540_054_f64;
        assert!((ci.lower - 2.0 * (-z * 0.2).exp()).abs() < 1e-12);
        assert!((ci.upper - 2.0 * (z * 0.2).exp()).abs() < 1e-12);
        // independent evaluation: 2·exp(∓1.959963984540054·0.2)
        assert!((ci.lower - 1.351_417_962_274_091).abs() < 1e-12);
        assert!((ci.upper - 2.959_854_102_626_415).abs() < 1e-12);
    }

    #[test]
    fn wider_level_contains_narrower() {
        let a = wald_ci_log_scale(1.7, 0.3, 0.95).unwrap();
        let b = wald_ci_log_scale(1.7, 0.3, 0.99).unwrap();
        assert!(b.lower < a.lower && a.upper < b.upper);
    }

    #[test]
    fn nonpositive_point_rejected() {
        assert!(wald_ci_log_scale(0.0, 0.1, 0.95).is_err());
        assert!(wald_ci_log_scale(-1.0, 0.1, 0.95).is_err());
        assert!(wald_ci_log_scale(1.0, 0.1, 1.0).is_err());
    }

    fn two_by_two(a: usize, n1: usize, c: usize, n0: usize) -> Dataset {
        let mut y = Vec::new();
        let mut x = Vec::new();
        for i in 0..n1 {
            y.push((i < a) as u8 as f64);
            x.push(1.0);
        }
        for i in 0..n0 {
            y.push((i < c) as u8 as f64);
            x.push(0.0);
        }
        Dataset::from_columns(ModelSpec::new("y", "x", &[]), y, vec![x]).unwrap()
    }

    #[test]
    fn robust_poisson_matches_log_risk_ratio_se() {
        let (a, n1, c, n0) = (37usize, 120usize, 18usize, 140usize);
        let ds = two_by_two(a, n1, c, n0);
        let fit = fit_glm(&ds, FamilyLink::PoissonLog).unwrap();
        let v = sandwich_vcov(&fit, &ds).unwrap();
        let expected = (1.0 / a as f64 - 1.0 / n1 as f64 + 1.0 / c as f64 - 1.0 / n0 as f64).sqrt();
        assert!((v[(1, 1)].sqrt() - expected).abs() < 1e-10);
    }

    #[test]
    fn four_row_triple_product() {
        // intercept + one covariate, explicit sums
        let ds = Dataset::from_columns(
            ModelSpec::new("y", "x", &[]),
            vec![1.0, 0.0, 1.0, 0.0],
            vec![vec![0.5, 1.0, 2.0, -1.0]],
        )
        .unwrap();
        let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
        let xs = [0.5, 1.0, 2.0, -1.0];
        let ys = [1.0, 0.0, 1.0, 0.0];
        let (mut b00, mut b01, mut b11) = (0.0, 0.0, 0.0);
        let (mut m00, mut m01, mut m11) = (0.0, 0.0, 0.0);
        for i in 0..4 {
            let eta = fit.beta[0] + fit.beta[1] * xs[i];
            let mu = 1.0 / (1.0 + (-eta as f64).exp());
            let w = mu * (1.0 - mu);
            b00 += w;
            b01 += w * xs[i];
            b11 += w * xs[i] * xs[i];
            let r2 = (ys[i] - mu) * (ys[i] - mu);
            m00 += r2;
            m01 += r2 * xs[i];
            m11 += r2 * xs[i] * xs[i];
        }
        let det = b00 * b11 - b01 * b01;
        let bi = [[b11 / det, -b01 / det], [-b01 / det, b00 / det]];
        let m = [[m00, m01], [m01, m11]];
        let v = sandwich_vcov(&fit, &ds).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        s += bi[r][k] * m[k][l] * bi[l][c];
                    }
                }
                assert!((v[(r, c)] - s).abs() < 1e-10 * (1.0 + s.abs()), "{r},{c}");
            }
        }
    }

    #[test]
    fn sandwich_close_to_model_based_when_model_is_right() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let zi = rng.random::<f64>() * 4.0 - 2.0;
            let p = 1.0 / (1.0 + (1.0 - 0.7 * xi - 0.4 * zi).exp());
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            x.push(xi);
            z.push(zi);
        }
        let ds = Dataset::from_columns(ModelSpec::new("y", "x", &["z"]), y, vec![x, z]).unwrap();
        let fit = fit_glm(&ds, FamilyLink::BinomialLogit).unwrap();
        let v = sandwich_vcov(&fit, &ds).unwrap();
        for j in 0..3 {
            let ratio = v[(j, j)].sqrt() / fit.std_error(j);
            assert!((ratio - 1.0).abs() < 0.10, "column {j}: ratio {ratio}");
        }
    }

    proptest! {
        #[test]
        fn log_scale_interval_is_scale_equivariant(
            point in 0.05f64..20.0, rel in 0.0f64..1.0, c in 0.01f64..100.0,
        ) {
            let se = point * rel;
            let a = wald_ci_log_scale(point, se, 0.95).unwrap();
            let b = wald_ci_log_scale(c * point, c * se, 0.95).unwrap();
            prop_assert!((b.lower - c * a.lower).abs() <= 1e-12 * b.lower.abs().max(1.0));
            prop_assert!((b.upper - c * a.upper).abs() <= 1e-12 * b.upper.abs().max(1.0));
            prop_assert!(a.lower <= a.point && a.point <= a.upper);
        }

        #[test]
        fn sandwich_is_symmetric_psd(
            rows in prop::collection::vec((0u8..2, 0u8..2, -2.0f64..2.0), 30..80)
        ) {
            let ds = Dataset::from_columns(
                ModelSpec::new("y", "x", &["z"]),
                rows.iter().map(|r| r.0 as f64).collect(),
                vec![rows.iter().map(|r| r.1 as f64).collect(), rows.iter().map(|r| r.2).collect()],
            ).unwrap();
            let Ok(fit) = fit_glm(&ds, FamilyLink::PoissonLog) else { return Ok(()); };
            let v = sandwich_vcov(&fit, &ds).unwrap();
            prop_assert!(v.asymmetry() <= 1e-10);
            // PSD: Cholesky of V + εI succeeds and diagonal is nonnegative
            let mut shifted = v.clone();
            let scale = v.max_abs().max(1e-300);
            for j in 0..3 {
                prop_assert!(v[(j, j)] >= -1e-10);
                shifted[(j, j)] += 1e-10 * scale;
            }
            prop_assert!(Cholesky::new(&shifted).is_ok());
        }
    }
}
