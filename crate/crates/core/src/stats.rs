//! Goodness-of-fit metrics, paired comparisons and small regressions.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub r2: f64,
    pub rmse: f64,
}

impl MetricPair {
    pub fn compute(reference: &[f64], pred: &[f64]) -> Result<Self> {
        Ok(Self { r2: r_squared(reference, pred)?, rmse: rmse(reference, pred)? })
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `1 - SS_res / SS_tot`; negative when worse than the mean.
pub fn r_squared(reference: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(reference, pred)?;
    if reference.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let m = mean(reference);
    let ss_tot: f64 = reference.iter().map(|r| (r - m) * (r - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantReference);
    }
    let ss_res: f64 = reference.iter().zip(pred).map(|(r, p)| (r - p) * (r - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(reference: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(reference, pred)?;
    if reference.is_empty() {
        return Err(Error::EmptySeries);
    }
    let ss: f64 = reference.iter().zip(pred).map(|(r, p)| (r - p) * (r - p)).sum();
    Ok((ss / reference.len() as f64).sqrt())
}

/// Direction of a one-tailed paired test on `x - y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    /// `x` tends to exceed `y`.
    Greater,
    /// `x` tends to fall below `y`.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub p_one_tailed: f64,
    pub cohens_d: f64,
    pub n_pairs: usize,
    /// Pairs dropped for having a zero difference.
    pub n_zero: usize,
    pub statistic: f64,
    pub exact: bool,
    pub direction: Alternative,
}

/// Largest sample handled by full sign enumeration.
pub const EXACT_MAX_N: usize = 20;

/// Average ranks of `|d|`, 1-based.
fn average_ranks(abs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Null distribution of the positive-rank sum for integer `ranks`, by visiting
/// every one of the `2^n` sign patterns. Returns `(statistic, probability)`
/// pairs sorted by statistic.
pub fn signed_rank_null_distribution(ranks: &[u32]) -> Vec<(u32, f64)> {
    let n = ranks.len();
    assert!(n <= 30, "enumeration limited to 30 ranks");
    let max: u32 = ranks.iter().sum();
    let mut counts = vec![0u64; max as usize + 1];
    for mask in 0u64..(1u64 << n) {
        let mut w = 0;
        for (k, r) in ranks.iter().enumerate() {
            if mask >> k & 1 == 1 {
                w += r;
            }
        }
        counts[w as usize] += 1;
    }
    let total = (1u64 << n) as f64;
    counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c > 0)
        .map(|(w, c)| (w as u32, c as f64 / total))
        .collect()
}

/// One-tailed Wilcoxon signed-rank test of `x` against `y`.
///
/// Zero differences are dropped. With `n <= 20` and no tied magnitudes the
/// p-value is exact; otherwise a normal approximation with tie and
/// continuity corrections is used. Cohen's d is reported in the
/// `mean(y - x) / sd(y - x)` convention of [`cohens_d_paired`].
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<PairedTestResult> {
    check_pair(x, y)?;
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n_zero = x.len() - diffs.len();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    let exact = n <= EXACT_MAX_N && ties.is_empty();
    let p = if exact {
        let int_ranks: Vec<u32> = ranks.iter().map(|r| *r as u32).collect();
        let dist = signed_rank_null_distribution(&int_ranks);
        let w = w_plus as u32;
        let tail: f64 = match alternative {
            Alternative::Greater => dist.iter().filter(|(s, _)| *s >= w).map(|(_, p)| p).sum(),
            Alternative::Less => dist.iter().filter(|(s, _)| *s <= w).map(|(_, p)| p).sum(),
        };
        tail.min(1.0)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj;
        let sd = var.sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
        match alternative {
            Alternative::Greater => 1.0 - std_normal.cdf((w_plus - mu - 0.5) / sd),
            Alternative::Less => std_normal.cdf((w_plus - mu + 0.5) / sd),
        }
    };

    let d = match cohens_d_paired(x, y) {
        Ok(d) => d,
        Err(Error::ZeroVariance) | Err(Error::EmptyInput) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(PairedTestResult {
        p_one_tailed: p.clamp(0.0, 1.0),
        cohens_d: d,
        n_pairs: n,
        n_zero,
        statistic: w_plus,
        exact,
        direction: alternative,
    })
}

/// `mean(y - x) / sd(y - x)` with the `n - 1` sample standard deviation.
pub fn cohens_d_paired(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).collect();
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (d.len() - 1) as f64;
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(m / var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub max: f64,
    pub min: f64,
}

pub fn summary_stats(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Ok(Summary { median, max: v[n - 1], min: v[0] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64)> {
    check_pair(xs, ys)?;
    let n = xs.len();
    if n < 2 {
        return Err(Error::DegenerateDesign(format!("{n} points")));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateDesign("regressor has no spread".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx, mx, sxx))
}

/// Least squares of `ys` on `ln(xs)`.
pub fn log_curve_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if let Some(x) = xs.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::DegenerateDesign(format!("non-positive abscissa {x}")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let (slope, intercept, _, _) = ols(&lx, ys)?;
    let my = mean(ys);
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 =
        lx.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandKind {
    /// Confidence band for the regression line itself.
    #[default]
    MeanResponse,
    /// Band for a new observation at the same abscissa.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFitCi {
    pub slope: f64,
    pub intercept: f64,
    /// `(lower, upper)` at every input abscissa.
    pub band: Vec<(f64, f64)>,
    pub coverage: f64,
    pub residuals: Vec<f64>,
}

/// OLS line with a pointwise t-band at `level` and the share of observations
/// falling inside it.
pub fn linear_fit_ci(xs: &[f64], ys: &[f64], level: f64, kind: BandKind) -> Result<LinearFitCi> {
    check_pair(xs, ys)?;
    let n = xs.len();
    if n < 3 {
        return Err(Error::DegenerateDesign(format!("{n} points, need 3")));
    }
    let (slope, intercept, mx, sxx) = ols(xs, ys)?;
    let residuals: Vec<f64> =
        xs.iter().zip(ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .map_err(|e| Error::DegenerateDesign(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    let extra = match kind {
        BandKind::MeanResponse => 0.0,
        BandKind::Prediction => 1.0,
    };
    let mut inside = 0usize;
    let band: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let fit = intercept + slope * x;
            let half = t * (s2 * (extra + 1.0 / n as f64 + (x - mx).powi(2) / sxx)).sqrt();
            let (lo, hi) = (fit - half, fit + half);
            // Rounding-level slack so exactly collinear data counts as covered.
            let slack = 4.0 * f64::EPSILON * fit.abs().max(y.abs()).max(1.0);
            if *y >= lo - slack && *y <= hi + slack {
                inside += 1;
            }
            (lo, hi)
        })
        .collect();
    Ok(LinearFitCi { slope, intercept, band, coverage: inside as f64 / n as f64, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_cases() {
        let r = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&r, &r).unwrap(), 1.0);
        assert_eq!(r_squared(&r, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        // SS_res = 1, SS_tot = 2.
        assert_eq!(r_squared(&r, &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert!(matches!(r_squared(&[2.0, 2.0], &[1.0, 2.0]), Err(Error::ConstantReference)));
        assert!(matches!(r_squared(&r, &[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 5.0], &[1.0, 5.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 5.0], &[3.5, 7.5]).unwrap() - 2.5).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5_f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&[], &[]), Err(Error::EmptySeries)));
    }

    #[test]
    fn wilcoxon_exact_small_samples() {
        let y = vec![0.0; 5];
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert!(r.exact);
        assert_eq!(r.p_one_tailed, 1.0 / 32.0);
        let r = wilcoxon_signed_rank(&x, &y, Alternative::Less).unwrap();
        assert_eq!(r.p_one_tailed, 1.0);

        let x: Vec<f64> = (1..=12).map(|i| i as f64 * 0.7).collect();
        let r = wilcoxon_signed_rank(&x, &vec![0.0; 12], Alternative::Greater).unwrap();
        assert_eq!(r.p_one_tailed, 1.0 / 4096.0);

        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, Alternative::Greater),
            Err(Error::AllZeroDifferences)
        ));
    }

    #[test]
    fn wilcoxon_drops_zero_differences() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y = [1.0, 1.0, 1.0, 1.0];
        let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert_eq!((r.n_pairs, r.n_zero), (3, 1));
        assert_eq!(r.p_one_tailed, 1.0 / 8.0);
    }

    #[test]
    fn wilcoxon_normal_path_with_ties() {
        // Tied magnitudes force the approximation.
        let x = [1.0, 1.0, 2.0, 2.0, 3.0, -1.0, 4.0, 5.0];
        let y = [0.0; 8];
        let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert!(!r.exact);
        // ranks: |1| x3 -> 2, |2| x2 -> 4.5, 3 -> 6, 4 -> 7, 5 -> 8.
        assert_eq!(r.statistic, 2.0 + 2.0 + 4.5 + 4.5 + 6.0 + 7.0 + 8.0);
        let n = 8.0_f64;
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - (24.0 + 6.0) / 48.0;
        let z = (r.statistic - n * (n + 1.0) / 4.0 - 0.5) / var.sqrt();
        let expect = 1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z);
        assert!((r.p_one_tailed - expect).abs() < 1e-12);
    }

    #[test]
    fn null_distribution_sums_to_one() {
        let dist = signed_rank_null_distribution(&[1, 2, 3, 4, 5, 6, 7]);
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        assert_eq!(dist.first().unwrap().0, 0);
        assert_eq!(dist.last().unwrap().0, 28);
    }

    #[test]
    fn cohens_d_cases() {
        assert_eq!(cohens_d_paired(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(cohens_d_paired(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert!(matches!(cohens_d_paired(&[0.0, 0.0], &[2.0, 2.0]), Err(Error::ZeroVariance)));
        let a = [0.3, 0.9, 0.5, 0.7];
        let b = [0.2, 0.4, 0.8, 0.1];
        assert_eq!(cohens_d_paired(&a, &b).unwrap(), -cohens_d_paired(&b, &a).unwrap());
    }

    #[test]
    fn summary_cases() {
        let s = summary_stats(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.median, s.max, s.min), (2.0, 3.0, 1.0));
        assert_eq!(summary_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap().median, 2.5);
        let s = summary_stats(&[7.5]).unwrap();
        assert_eq!((s.median, s.max, s.min), (7.5, 7.5, 7.5));
        assert!(matches!(summary_stats(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn log_fit_exact_and_two_point() {
        let xs: Vec<f64> = (1..20).map(|i| 0.2 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.02 * x.ln() + 0.1).collect();
        let f = log_curve_fit(&xs, &ys).unwrap();
        assert!((f.slope - 0.02).abs() <= 1e-10 * 0.02);
        assert!((f.intercept - 0.1).abs() <= 1e-10 * 0.1);
        assert!((f.r2 - 1.0).abs() <= 1e-10);

        let f = log_curve_fit(&[1.0, 3.0], &[5.0, -1.0]).unwrap();
        assert!((f.intercept - 5.0).abs() < 1e-12);
        assert!((f.slope * 3.0_f64.ln() + f.intercept + 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);

        assert!(matches!(log_curve_fit(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::DegenerateDesign(_))));
        assert!(matches!(log_curve_fit(&[0.0, 2.0], &[1.0, 3.0]), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn log_fit_matches_normal_equations() {
        let xs = [0.4, 0.7, 1.1, 1.6, 2.2, 2.9, 3.3];
        let ys = [0.08, 0.095, 0.101, 0.108, 0.117, 0.119, 0.126];
        // [[n, Σu], [Σu, Σu²]] (b, a) = (Σy, Σuy), u = ln x, solved by Cramer's rule.
        let u: Vec<f64> = xs.iter().map(|x: &f64| x.ln()).collect();
        let n = u.len() as f64;
        let su: f64 = u.iter().sum();
        let suu: f64 = u.iter().map(|v| v * v).sum();
        let sy: f64 = ys.iter().sum();
        let suy: f64 = u.iter().zip(&ys).map(|(a, b)| a * b).sum();
        let det = n * suu - su * su;
        let slope = (n * suy - su * sy) / det;
        let intercept = (suu * sy - su * suy) / det;
        let f = log_curve_fit(&xs, &ys).unwrap();
        assert!((f.slope - slope).abs() <= 1e-10 * slope.abs());
        assert!((f.intercept - intercept).abs() <= 1e-10 * intercept.abs());
    }

    #[test]
    fn linear_ci_exact_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.44 * x + 0.3).collect();
        let fit = linear_fit_ci(&xs, &ys, 0.95, BandKind::MeanResponse).unwrap();
        assert_eq!(fit.coverage, 1.0);
        assert!(fit.band.iter().all(|(lo, hi)| hi - lo < 1e-10));
        assert!(matches!(
            linear_fit_ci(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0], 0.95, BandKind::MeanResponse),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn linear_ci_residuals_are_orthogonal() {
        let xs = [0.1, 0.5, 0.9, 1.7, 2.0, 3.1, 3.3, 4.0];
        let ys = [1.0, 1.4, 1.1, 2.3, 2.0, 3.5, 2.9, 4.4];
        let fit = linear_fit_ci(&xs, &ys, 0.95, BandKind::Prediction).unwrap();
        let s0: f64 = fit.residuals.iter().sum();
        let s1: f64 = fit.residuals.iter().zip(&xs).map(|(r, x)| r * x).sum();
        assert!(s0.abs() <= 1e-10 && s1.abs() <= 1e-10);
        let mean_band = linear_fit_ci(&xs, &ys, 0.95, BandKind::MeanResponse).unwrap();
        for (p, m) in fit.band.iter().zip(&mean_band.band) {
            assert!(p.1 - p.0 > m.1 - m.0);
        }
    }
}
