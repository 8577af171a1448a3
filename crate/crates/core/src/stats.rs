//! Small statistical helpers shared by the verification experiments: sample
//! summaries, weighted least squares with a slope standard error, exact
//! binomial (Clopper–Pearson) confidence intervals, and the two-sample
//! Kolmogorov–Smirnov test with the asymptotic p-value.

use statrs::distribution::{Beta, ContinuousCDF};

use crate::{Error, Result};

/// Sample mean and its standard error (`sd / sqrt(n)`, Bessel-corrected).
/// Fewer than two samples yield a standard error of zero.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Bessel-corrected sample variance; zero for fewer than two samples.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0)
}

/// A fitted line with uncertainty on the slope.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    /// Fitted slope.
    pub slope: f64,
    /// Fitted intercept.
    pub intercept: f64,
    /// Standard error of the slope.
    pub slope_se: f64,
    /// Residual scale estimate (square root of reduced chi-square).
    pub residual_scale: f64,
}

/// Weighted least-squares line fit `y ~ intercept + slope * x`.
///
/// Weights are treated as *relative* inverse variances: the slope's standard
/// error is scaled by the reduced chi-square, so it stays calibrated when the
/// absolute noise level is unknown. With two points the residual scale is
/// taken as one.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return Err(Error::InvalidConfig(format!(
            "line fit needs matching arrays with at least 2 points, got {n}/{}/{}",
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|&wi| !(wi > 0.0) || !wi.is_finite()) {
        return Err(Error::InvalidConfig("line fit weights must be positive".into()));
    }
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w
        .iter()
        .zip(x.iter().zip(y))
        .map(|(w, (x, y))| w * x * y)
        .sum();
    let det = sw * sxx - sx * sx;
    if det.abs() <= 1e-12 * sw * sxx.max(1.0) {
        return Err(Error::Degenerate(
            "line fit abscissae are (numerically) collinear".into(),
        ));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    let chi2: f64 = w
        .iter()
        .zip(x.iter().zip(y))
        .map(|(w, (x, y))| {
            let r = y - intercept - slope * x;
            w * r * r
        })
        .sum();
    let scale2 = if n > 2 { chi2 / (n as f64 - 2.0) } else { 1.0 };
    let slope_se = (scale2 * sw / det).sqrt();
    Ok(LineFit {
        slope,
        intercept,
        slope_se,
        residual_scale: scale2.sqrt(),
    })
}

/// Exact two-sided Clopper–Pearson interval for a binomial proportion at
/// confidence `1 - alpha`.
pub fn clopper_pearson(successes: u64, trials: u64, alpha: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::InvalidConfig(format!(
            "binomial interval needs 0 <= successes <= trials > 0, got {successes}/{trials}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence parameter must lie in (0, 1), got {alpha}"
        )));
    }
    let (k, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0)
            .map_err(|e| Error::Degenerate(format!("beta quantile: {e}")))?
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .map_err(|e| Error::Degenerate(format!("beta quantile: {e}")))?
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lo, hi))
}

/// Two-sample Kolmogorov–Smirnov test. Returns the statistic `D` and the
/// asymptotic two-sided p-value (Stephens' small-sample correction).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig("KS test needs nonempty samples".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.total_cmp(q));
    ys.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut d = 0.0_f64;
    while i < n && j < m {
        let t = xs[i].min(ys[j]);
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let p = ks_tail(lambda);
    Ok((d, p))
}

/// Kolmogorov distribution tail `Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2)`.
fn ks_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_and_stderr_of_known_sample() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5);
        // Sample variance 5/3, so the standard error is sqrt(5/12).
        assert_abs_diff_eq!(se, (5.0_f64 / 12.0).sqrt(), epsilon = 1e-15);
        assert_eq!(mean_stderr(&[7.0]).1, 0.0);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|t| 2.0 - 3.0 * t).collect();
        let w = [1.0; 4];
        let fit = weighted_line_fit(&x, &y, &w).unwrap();
        assert_abs_diff_eq!(fit.slope, -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 2.0, epsilon = 1e-12);
        assert!(fit.slope_se < 1e-9);
    }

    #[test]
    fn line_fit_weights_pull_toward_heavy_points() {
        // Two clusters with contradictory slopes; the heavy weights dominate.
        let x = [0.0, 1.0, 0.0, 1.0];
        let y = [0.0, 1.0, 0.5, 0.0];
        let heavy_first = weighted_line_fit(&x, &y, &[100.0, 100.0, 1.0, 1.0]).unwrap();
        let heavy_second = weighted_line_fit(&x, &y, &[1.0, 1.0, 100.0, 100.0]).unwrap();
        assert!(heavy_first.slope > 0.8);
        assert!(heavy_second.slope < -0.3);
    }

    #[test]
    fn clopper_pearson_matches_reference_values() {
        // Reference: exact interval for 8 successes of 10 at 95%.
        let (lo, hi) = clopper_pearson(8, 10, 0.05).unwrap();
        assert_abs_diff_eq!(lo, 0.44390, epsilon = 5e-5);
        assert_abs_diff_eq!(hi, 0.97479, epsilon = 5e-5);
        // Degenerate corners.
        let (lo, hi) = clopper_pearson(0, 20, 0.05).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.25);
        let (lo, hi) = clopper_pearson(20, 20, 0.05).unwrap();
        assert!(lo > 0.75 && lo < 1.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn ks_statistic_on_disjoint_samples_is_one() {
        let a = [0.0, 0.1, 0.2];
        let b = [1.0, 1.1, 1.2];
        let (d, p) = ks_two_sample(&a, &b).unwrap();
        assert_abs_diff_eq!(d, 1.0);
        assert!(p < 0.05);
    }

    #[test]
    fn ks_accepts_identical_distributions() {
        // Deterministic interleaved samples from the same uniform grid.
        let a: Vec<f64> = (0..500).map(|i| (2 * i) as f64 / 1000.0).collect();
        let b: Vec<f64> = (0..500).map(|i| (2 * i + 1) as f64 / 1000.0).collect();
        let (d, p) = ks_two_sample(&a, &b).unwrap();
        assert!(d < 0.01);
        assert!(p > 0.5);
    }
}
