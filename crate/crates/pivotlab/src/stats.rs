//! Small statistics helpers shared by the estimators and the test suites.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Wilson score interval for `hits` successes out of `n` at normal quantile `z`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("valid normal").inverse_cdf(p)
}

/// Upper tail `P(Z ≥ z)` of a standard normal.
pub fn normal_upper_tail(z: f64) -> f64 {
    1.0 - Normal::new(0.0, 1.0).expect("valid normal").cdf(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_square_p(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(stat)
}

/// Goodness of fit of `observed` counts against `expected_probs`.
///
/// Adjacent cells are pooled left to right until each expected count is at
/// least 5; a trailing deficient group joins the previous one.
pub fn chi_square_gof(observed: &[usize], expected_probs: &[f64]) -> ChiSquareResult {
    assert_eq!(observed.len(), expected_probs.len());
    let n: usize = observed.iter().sum();
    let nf = n as f64;
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&obs, &p) in observed.iter().zip(expected_probs) {
        o += obs as f64;
        e += p * nf;
        if e >= 5.0 {
            groups.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match groups.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => groups.push((o, e)),
        }
    }
    let statistic: f64 = groups
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e) * (o - e) / e } else if o > 0.0 { f64::INFINITY } else { 0.0 })
        .sum();
    let dof = groups.len().saturating_sub(1);
    ChiSquareResult { statistic, dof, p_value: chi_square_p(statistic, dof) }
}

/// Chi-square test that two samples of counts come from the same law.
///
/// Cells with small pooled counts are merged like in [`chi_square_gof`].
pub fn chi_square_homogeneity(a: &[usize], b: &[usize]) -> ChiSquareResult {
    let len = a.len().max(b.len());
    let get = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0) as f64;
    let (na, nb): (f64, f64) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    let total = na + nb;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut ca, mut cb) = (0.0, 0.0);
    for i in 0..len {
        ca += get(a, i);
        cb += get(b, i);
        let pooled = ca + cb;
        if pooled * na.min(nb) / total >= 5.0 {
            cells.push((ca, cb));
            ca = 0.0;
            cb = 0.0;
        }
    }
    if ca + cb > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += ca;
                last.1 += cb;
            }
            None => cells.push((ca, cb)),
        }
    }
    let mut statistic = 0.0;
    for &(x, y) in &cells {
        let col = x + y;
        let (ex, ey) = (col * na / total, col * nb / total);
        statistic += (x - ex).powi(2) / ex + (y - ey).powi(2) / ey;
    }
    let dof = cells.len().saturating_sub(1);
    ChiSquareResult { statistic, dof, p_value: chi_square_p(statistic, dof) }
}

/// Weighted least-squares line `y = a + b x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
}

/// Fits `y = a + b x` with weights `w`; the slope standard error uses the
/// weights as inverse variances when `known_variance` is set, and the
/// residual scatter otherwise.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64], known_variance: bool) -> LineFit {
    assert!(x.len() == y.len() && x.len() == w.len() && x.len() >= 2);
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if known_variance {
        (1.0 / sxx).sqrt()
    } else {
        let n = x.len() as f64;
        let rss: f64 = x
            .iter()
            .zip(y)
            .zip(w)
            .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
            .sum();
        if n > 2.0 {
            (rss / (n - 2.0) / sxx).sqrt()
        } else {
            0.0
        }
    };
    LineFit { intercept, slope, slope_se }
}

/// Ordinary least-squares line.
pub fn line_fit(x: &[f64], y: &[f64]) -> LineFit {
    weighted_line_fit(x, y, &vec![1.0; x.len()], false)
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical quantile (type 7, linear interpolation) of an unsorted sample.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    sorted_quantile(&s, q)
}

/// Quantile of an already sorted sample.
pub fn sorted_quantile(s: &[f64], q: f64) -> f64 {
    assert!(!s.is_empty());
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_contains_truth() {
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5);
        let (lo, hi) = wilson_interval(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
    }

    #[test]
    fn chi_square_accepts_exact_counts() {
        let r = chi_square_gof(&[250, 250, 500], &[0.25, 0.25, 0.5]);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let r = chi_square_gof(&[400, 100, 500], &[0.25, 0.25, 0.5]);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn pooling_merges_sparse_cells() {
        let r = chi_square_gof(&[95, 3, 1, 1], &[0.95, 0.03, 0.01, 0.01]);
        assert_eq!(r.dof, 1);
    }

    #[test]
    fn homogeneity_of_identical_samples() {
        let r = chi_square_homogeneity(&[10, 20, 30], &[20, 40, 60]);
        assert!(r.statistic.abs() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = line_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(f.slope_se < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-5);
    }
}
