//! Monte Carlo estimators for products `γ̄_n = g_1 ⋯ g_n` of i.i.d. steps,
//! and the tail/moment toolbox used to phrase their bounds.
//!
//! Every estimator runs its trials in parallel, each on its own
//! [`RngStream::derive`] child, so results only depend on the seed.
//! Convergence curves measure against the finite-horizon proxy
//! `l∞ ≈ U¹(γ̄_{n_max})`; the horizon is part of every report.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::measures::{MeasureSpec, RngStream};
use crate::projgeo::{
    jacobi_svd, log_spectral_radius, op_norm, prox, singular_data, top_eigenline, vec_dist, ExteriorProduct,
    Matrix,
};
use crate::stats::{mean_se, normal_upper_tail, sorted_quantile, weighted_line_fit, wilson_interval};

/// Normal quantile used for every two-sided 95% interval reported here.
pub const Z95: f64 = 1.959963984540054;

/// Distances below this are treated as numerically zero in rate fits.
pub const DISTANCE_FLOOR: f64 = 1e-13;

/// Mean `sqz/n` at or below this is roundoff, not escape (rotations give ~1e-16).
pub const ESCAPE_FLOOR: f64 = 1e-6;

/// Minimum number of exceedances for a point to enter a large-deviation fit.
pub const MIN_EXCEEDANCES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("non-proximal suspect: mean sqz at n = {n} is {mean_sqz:e}, no escape")]
    NonProximal { n: usize, mean_sqz: f64 },
    #[error("every trial hit the kernel of the product (see measures::kernel_probe)")]
    AllKernel,
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

fn check_grid(n_grid: &[usize], trials: usize) -> Result<()> {
    if n_grid.is_empty() || n_grid[0] == 0 {
        return Err(EstimatorError::Invalid("n grid must be non-empty and positive".into()));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EstimatorError::Invalid("n grid must be strictly increasing".into()));
    }
    if trials == 0 {
        return Err(EstimatorError::Invalid("need at least one trial".into()));
    }
    Ok(())
}

/// Runs one trajectory to `n_grid.last()` and hands the running product to
/// `visit` at every grid point.
fn walk<F: FnMut(usize, &Matrix)>(nu: &MeasureSpec, n_grid: &[usize], rng: &mut RngStream, mut visit: F) {
    let mut g = Matrix::identity(nu.dim());
    let mut next = 0;
    for n in 1..=*n_grid.last().expect("checked grid") {
        g = g.mul(&nu.sample(rng));
        if n == n_grid[next] {
            visit(next, &g);
            next += 1;
        }
    }
}

/// Mean with a normal 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridStat {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

impl GridStat {
    fn from_sample(n: usize, v: &[f64]) -> Self {
        let (mean, se) = mean_se(v);
        GridStat { n, mean, se, lo: mean - Z95 * se, hi: mean + Z95 * se }
    }
}

/// Escape-rate estimate: `sqz(γ̄_n)/n` along the grid, `σ̂` from the last point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaEstimate {
    pub j: usize,
    pub per_n: Vec<GridStat>,
    pub sigma: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// The last two grid means agree within their joint interval.
    pub stabilized: bool,
}

/// `sqz_j(γ̄_n)` for every trial, grid point and requested `j`.
fn sqz_paths(
    nu: &MeasureSpec,
    js: &[usize],
    n_grid: &[usize],
    trials: usize,
    rng: &RngStream,
) -> Vec<Vec<Vec<f64>>> {
    let d = nu.dim();
    let kmax = js.iter().max().copied().unwrap_or(1) + 1;
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut acc = ExteriorProduct::new(d, kmax);
            let mut out = Vec::with_capacity(n_grid.len());
            let mut next = 0;
            for n in 1..=*n_grid.last().expect("checked grid") {
                acc.push(&nu.sample(&mut r));
                if n == n_grid[next] {
                    out.push(js.iter().map(|&j| acc.sqz(j)).collect());
                    next += 1;
                }
            }
            out
        })
        .collect()
}

fn sigma_from_paths(j_index: usize, j: usize, n_grid: &[usize], paths: &[Vec<Vec<f64>>]) -> SigmaEstimate {
    let per_n: Vec<GridStat> = n_grid
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let v: Vec<f64> = paths.iter().map(|p| p[i][j_index] / n as f64).collect();
            GridStat::from_sample(n, &v)
        })
        .collect();
    let last = per_n.last().expect("checked grid").clone();
    let stabilized = match per_n.len() {
        1 => true,
        k => {
            let prev = &per_n[k - 2];
            (last.mean - prev.mean).abs() <= Z95 * (last.se.powi(2) + prev.se.powi(2)).sqrt() + 1e-12
        }
    };
    SigmaEstimate { j, sigma: last.mean, se: last.se, ci: (last.lo, last.hi), stabilized, per_n }
}

/// `σ̂ = E sqz(γ̄_n)/n` with a 95% interval.
///
/// Errors when the mean gap at the largest `n` stays below `1e-6·n`: the
/// products do not escape, which is what a non-proximal measure looks like.
pub fn estimate_sigma(nu: &MeasureSpec, n_grid: &[usize], trials: usize, rng: &RngStream) -> Result<SigmaEstimate> {
    check_grid(n_grid, trials)?;
    if nu.dim() < 2 {
        return Err(EstimatorError::Invalid("sqz needs d >= 2".into()));
    }
    let paths = sqz_paths(nu, &[1], n_grid, trials, rng);
    let est = sigma_from_paths(0, 1, n_grid, &paths);
    let n = *n_grid.last().expect("checked grid");
    if !(est.sigma > ESCAPE_FLOOR) {
        return Err(EstimatorError::NonProximal { n, mean_sqz: est.sigma * n as f64 });
    }
    Ok(est)
}

/// `E log‖γ̄_n‖/n` computed with plain dense products renormalized at every
/// step; independent of the exterior-power machinery behind [`estimate_sigma`].
pub fn top_exponent(nu: &MeasureSpec, n: usize, trials: usize, rng: &RngStream) -> Result<GridStat> {
    check_grid(&[n], trials)?;
    let d = nu.dim();
    let v: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut acc = DMatrix::<f64>::identity(d, d);
            let mut log = 0.0;
            for _ in 0..n {
                let g = nu.sample(&mut r);
                acc = acc * g.entries();
                log += g.log_scale();
                let m = acc.amax();
                if m == 0.0 {
                    return f64::NEG_INFINITY;
                }
                acc /= m;
                log += m.ln();
            }
            (log + jacobi_svd(&acc).values[0].ln()) / n as f64
        })
        .collect();
    Ok(GridStat::from_sample(n, &v))
}

/// One point of a large-deviation curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdpPoint {
    pub n: usize,
    pub hits: usize,
    pub trials: usize,
    pub p_hat: f64,
}

/// `P(sqz(γ̄_n) ≤ αn)` along the grid with a fitted exponential decay.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LdpFit {
    pub alpha: f64,
    pub points: Vec<LdpPoint>,
    /// Decay rate `β̂` (`log p̂ ≈ c − β̂ n`); `+inf` when no trial ever exceeds,
    /// `NaN` when fewer than two points have enough exceedances.
    pub beta: f64,
    pub beta_se: f64,
    pub intercept: f64,
    /// Points used by the fit.
    pub used: usize,
    /// One-sided p-value of `β̂ > 0`.
    pub p_value: f64,
}

/// Large-deviation curves for each `α` in `alphas`.
///
/// Every grid point gets its own independent trials so that the weighted
/// fit of `log p̂` (inverse-variance weights `hits/(1−p̂)`) sees independent
/// errors. Only points with at least [`MIN_EXCEEDANCES`] hits and `p̂ < 1`
/// are fitted.
pub fn ldp_curve(
    nu: &MeasureSpec,
    alphas: &[f64],
    n_grid: &[usize],
    trials: usize,
    rng: &RngStream,
) -> Result<Vec<LdpFit>> {
    check_grid(n_grid, trials)?;
    if nu.dim() < 2 || alphas.iter().any(|a| !a.is_finite()) {
        return Err(EstimatorError::Invalid("need d >= 2 and finite alphas".into()));
    }
    let d = nu.dim();
    let mut hits = vec![vec![0usize; n_grid.len()]; alphas.len()];
    for (i, &n) in n_grid.iter().enumerate() {
        let grid_rng = rng.derive(i as u64);
        let sq: Vec<f64> = (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let mut r = grid_rng.derive(t);
                let mut acc = ExteriorProduct::new(d, 2);
                for _ in 0..n {
                    acc.push(&nu.sample(&mut r));
                }
                acc.sqz(1)
            })
            .collect();
        for (a, &alpha) in alphas.iter().enumerate() {
            hits[a][i] = sq.iter().filter(|&&s| s <= alpha * n as f64).count();
        }
    }
    Ok(alphas
        .iter()
        .zip(hits)
        .map(|(&alpha, h)| {
            let points: Vec<LdpPoint> = n_grid
                .iter()
                .zip(&h)
                .map(|(&n, &k)| LdpPoint { n, hits: k, trials, p_hat: k as f64 / trials as f64 })
                .collect();
            fit_ldp(alpha, points)
        })
        .collect())
}

fn fit_ldp(alpha: f64, points: Vec<LdpPoint>) -> LdpFit {
    let usable: Vec<&LdpPoint> =
        points.iter().filter(|p| p.hits >= MIN_EXCEEDANCES && p.hits < p.trials).collect();
    let total: usize = points.iter().map(|p| p.hits).sum();
    let used = usable.len();
    if used < 2 {
        let (beta, p_value) = if total == 0 { (f64::INFINITY, 0.0) } else { (f64::NAN, 1.0) };
        return LdpFit { alpha, points, beta, beta_se: f64::NAN, intercept: f64::NAN, used, p_value };
    }
    let x: Vec<f64> = usable.iter().map(|p| p.n as f64).collect();
    let y: Vec<f64> = usable.iter().map(|p| p.p_hat.ln()).collect();
    let w: Vec<f64> = usable.iter().map(|p| p.hits as f64 / (1.0 - p.p_hat)).collect();
    let fit = weighted_line_fit(&x, &y, &w, true);
    let beta = -fit.slope;
    LdpFit {
        alpha,
        beta,
        beta_se: fit.slope_se,
        intercept: fit.intercept,
        used,
        p_value: normal_upper_tail(beta / fit.slope_se),
        points,
    }
}

/// Quantile summary of a distance sample at one `n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistancePoint {
    pub n: usize,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    /// Trials contributing (the others were excluded, e.g. `γ̄_n v = 0`).
    pub used: usize,
}

/// A distance-to-`l∞` curve with a fitted exponential rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceCurve {
    pub n_max: usize,
    pub points: Vec<DistancePoint>,
    /// `α̂` in `median ≈ C e^{−α̂ n}`, fitted on medians above
    /// [`DISTANCE_FLOOR`]; `+inf` when every median is below the floor.
    pub rate: f64,
    pub rate_se: f64,
    pub fitted: usize,
}

fn curve(n_grid: &[usize], n_max: usize, samples: Vec<Vec<f64>>) -> ConvergenceCurve {
    let points: Vec<DistancePoint> = n_grid
        .iter()
        .zip(samples)
        .map(|(&n, mut v)| {
            v.retain(|x| x.is_finite());
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                return DistancePoint { n, median: f64::NAN, q10: f64::NAN, q90: f64::NAN, used: 0 };
            }
            DistancePoint {
                n,
                median: sorted_quantile(&v, 0.5),
                q10: sorted_quantile(&v, 0.1),
                q90: sorted_quantile(&v, 0.9),
                used: v.len(),
            }
        })
        .collect();
    let good: Vec<&DistancePoint> = points.iter().filter(|p| p.median > DISTANCE_FLOOR).collect();
    let fitted = good.len();
    let (rate, rate_se) = match fitted {
        0 => (f64::INFINITY, 0.0),
        1 => (f64::NAN, f64::NAN),
        _ => {
            let x: Vec<f64> = good.iter().map(|p| p.n as f64).collect();
            let y: Vec<f64> = good.iter().map(|p| p.median.ln()).collect();
            let fit = weighted_line_fit(&x, &y, &vec![1.0; x.len()], false);
            (-fit.slope, fit.slope_se)
        }
    };
    ConvergenceCurve { n_max, points, rate, rate_se, fitted }
}

/// Transposes per-trial rows into per-grid-point samples.
fn by_grid(rows: Vec<Vec<f64>>, len: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(rows.len()); len];
    for row in rows {
        for (i, x) in row.into_iter().enumerate() {
            out[i].push(x);
        }
    }
    out
}

fn check_horizon(n_grid: &[usize], n_max: usize) -> Result<()> {
    if n_max < *n_grid.last().unwrap_or(&0) {
        return Err(EstimatorError::Invalid("n_max must cover the n grid".into()));
    }
    Ok(())
}

/// Grid extended by the horizon, for [`walk`].
fn with_horizon(n_grid: &[usize], n_max: usize) -> Vec<usize> {
    let mut g = n_grid.to_vec();
    if g.last() != Some(&n_max) {
        g.push(n_max);
    }
    g
}

fn top_left(g: &Matrix) -> DVector<f64> {
    singular_data(g).left.column(0).into_owned()
}

/// Per-trial limit lines and the convergence of `U¹(γ̄_n)` towards them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitLine {
    /// `U¹(γ̄_{n_max})` for each trial, as unit vectors.
    pub lines: Vec<Vec<f64>>,
    pub curve: ConvergenceCurve,
}

pub fn limit_line(
    nu: &MeasureSpec,
    trials: usize,
    n_grid: &[usize],
    n_max: usize,
    rng: &RngStream,
) -> Result<LimitLine> {
    check_grid(n_grid, trials)?;
    check_horizon(n_grid, n_max)?;
    let grid = with_horizon(n_grid, n_max);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut us = Vec::with_capacity(grid.len());
            walk(nu, &grid, &mut r, |_, g| us.push(top_left(g)));
            let l = us.last().expect("non-empty grid").clone();
            let dist = us[..n_grid.len()].iter().map(|u| vec_dist(u, &l)).collect();
            (l.iter().copied().collect(), dist)
        })
        .collect();
    let (lines, dists): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(LimitLine { lines, curve: curve(n_grid, n_max, by_grid(dists, n_grid.len())) })
}

/// `d([γ̄_n v], l∞)` along the grid; trials with `γ̄_n v = 0` are excluded.
pub fn image_convergence(
    nu: &MeasureSpec,
    v: &DVector<f64>,
    trials: usize,
    n_grid: &[usize],
    n_max: usize,
    rng: &RngStream,
) -> Result<ConvergenceCurve> {
    check_grid(n_grid, trials)?;
    check_horizon(n_grid, n_max)?;
    if v.len() != nu.dim() || v.norm() == 0.0 {
        return Err(EstimatorError::Invalid("v must be a nonzero vector of dimension d".into()));
    }
    let grid = with_horizon(n_grid, n_max);
    let rows: Vec<Vec<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut images = Vec::with_capacity(grid.len());
            let mut l = None;
            walk(nu, &grid, &mut r, |i, g| {
                if i < n_grid.len() {
                    images.push(if g.is_zero() { DVector::zeros(v.len()) } else { g.entries() * v });
                }
                if i == grid.len() - 1 {
                    l = Some(top_left(g));
                }
            });
            let l = l.expect("horizon visited");
            images
                .iter()
                .map(|w| if w.norm() == 0.0 { f64::NAN } else { vec_dist(w, &l) })
                .collect()
        })
        .collect();
    let out = curve(n_grid, n_max, by_grid(rows, n_grid.len()));
    if out.points.iter().all(|p| p.used == 0) {
        return Err(EstimatorError::AllKernel);
    }
    Ok(out)
}

/// Eigenline convergence plus the fraction of proximal products.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenConvergence {
    pub curve: ConvergenceCurve,
    /// Fraction of trials with `prox(γ̄_n) > 0`, per grid point.
    pub prox_fraction: Vec<f64>,
}

/// `d(E⁺(γ̄_n), l∞)` along the grid; non-proximal products are excluded
/// from the curve and counted in `prox_fraction`.
pub fn eigen_convergence(
    nu: &MeasureSpec,
    trials: usize,
    n_grid: &[usize],
    n_max: usize,
    rng: &RngStream,
) -> Result<EigenConvergence> {
    check_grid(n_grid, trials)?;
    check_horizon(n_grid, n_max)?;
    let grid = with_horizon(n_grid, n_max);
    let rows: Vec<Vec<(bool, Option<DVector<f64>>)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut out = Vec::with_capacity(grid.len());
            let mut l = None;
            walk(nu, &grid, &mut r, |i, g| {
                if i < n_grid.len() {
                    let proximal = prox(g).map(|p| p > 0.0).unwrap_or(false);
                    let e = if proximal { top_eigenline(g).ok().map(|p| p.vector().clone()) } else { None };
                    out.push((proximal, e));
                }
                if i == grid.len() - 1 {
                    l = Some(top_left(g));
                }
            });
            let l = l.expect("horizon visited");
            out.push((true, Some(l)));
            out
        })
        .collect();
    let mut prox_fraction = vec![0.0; n_grid.len()];
    let mut dists = vec![Vec::new(); n_grid.len()];
    for row in &rows {
        let l = row.last().and_then(|x| x.1.as_ref()).expect("limit stored last");
        for i in 0..n_grid.len() {
            if row[i].0 {
                prox_fraction[i] += 1.0 / trials as f64;
            }
            if let Some(e) = &row[i].1 {
                dists[i].push(vec_dist(e, l));
            }
        }
    }
    Ok(EigenConvergence { curve: curve(n_grid, n_max, dists), prox_fraction })
}

/// Sorted sample viewed through its tail `t ↦ #{x > t}/len`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalTail {
    sorted: Vec<f64>,
}

impl EmpiricalTail {
    /// NaNs are dropped; `+inf` is kept and counts above every `t`.
    pub fn new(mut sample: Vec<f64>) -> Self {
        sample.retain(|x| !x.is_nan());
        sample.sort_by(f64::total_cmp);
        EmpiricalTail { sorted: sample }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sample(&self) -> &[f64] {
        &self.sorted
    }

    /// `η(t, +∞)`; the empty tail is identically 0.
    pub fn eval(&self, t: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        let below = self.sorted.partition_point(|&x| x <= t);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    pub fn quantile(&self, q: f64) -> f64 {
        sorted_quantile(&self.sorted, q)
    }
}

/// Empirical tails of a per-`n` statistic.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailCurve {
    pub n_grid: Vec<usize>,
    pub tails: Vec<EmpiricalTail>,
    /// Trials excluded at each `n` (exact zero coefficient, nilpotent product).
    pub excluded: Vec<usize>,
}

impl TailCurve {
    /// The `q`-quantile at each grid point.
    pub fn quantiles(&self, q: f64) -> Vec<f64> {
        self.tails.iter().map(|t| if t.is_empty() { f64::NAN } else { t.quantile(q) }).collect()
    }
}

fn tail_curve<F>(nu: &MeasureSpec, n_grid: &[usize], trials: usize, rng: &RngStream, stat: F) -> TailCurve
where
    F: Fn(&Matrix) -> f64 + Sync,
{
    let rows: Vec<Vec<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut out = Vec::with_capacity(n_grid.len());
            walk(nu, n_grid, &mut r, |_, g| out.push(stat(g)));
            out
        })
        .collect();
    let cols = by_grid(rows, n_grid.len());
    let excluded = cols.iter().map(|c| c.iter().filter(|x| !x.is_finite()).count()).collect();
    let tails = cols.into_iter().map(|mut c| {
        c.retain(|x| x.is_finite());
        EmpiricalTail::new(c)
    });
    TailCurve { n_grid: n_grid.to_vec(), tails: tails.collect(), excluded }
}

/// Tails of `log(‖f‖‖γ̄_n‖‖v‖/|f γ̄_n v|)`; exact zeros of `f γ̄_n v` are excluded.
pub fn coefficient_gap(
    nu: &MeasureSpec,
    f: &DVector<f64>,
    v: &DVector<f64>,
    n_grid: &[usize],
    trials: usize,
    rng: &RngStream,
) -> Result<TailCurve> {
    check_grid(n_grid, trials)?;
    let d = nu.dim();
    if f.len() != d || v.len() != d || f.norm() == 0.0 || v.norm() == 0.0 {
        return Err(EstimatorError::Invalid("f and v must be nonzero vectors of dimension d".into()));
    }
    let base = f.norm().ln() + v.norm().ln();
    Ok(tail_curve(nu, n_grid, trials, rng, |g| {
        if g.is_zero() {
            return f64::NAN;
        }
        let c = f.dot(&(g.entries() * v)).abs();
        if c == 0.0 {
            f64::NAN
        } else {
            base + op_norm(g) - g.log_scale() - c.ln()
        }
    }))
}

/// Tails of `log(‖γ̄_n‖/ρ₁(γ̄_n))`; numerically nilpotent products are excluded.
pub fn spectral_ratio(nu: &MeasureSpec, n_grid: &[usize], trials: usize, rng: &RngStream) -> Result<TailCurve> {
    check_grid(n_grid, trials)?;
    Ok(tail_curve(nu, n_grid, trials, rng, |g| match log_spectral_radius(g) {
        Ok(r) if r.is_finite() => op_norm(g) - r,
        _ => f64::NAN,
    }))
}

/// One radius of a regularity curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityPoint {
    pub r: f64,
    pub hits: usize,
    pub trials: usize,
    pub fraction: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `ξ̂(N_r(V))`, the fraction of limit lines within `r` of `P(V)`, with
/// Wilson 95% intervals. `l∞` is `U¹(γ̄_{n_max})`.
pub fn stationary_regularity(
    nu: &MeasureSpec,
    basis: &[DVector<f64>],
    r_grid: &[f64],
    trials: usize,
    n_max: usize,
    rng: &RngStream,
) -> Result<Vec<RegularityPoint>> {
    check_grid(&[n_max], trials)?;
    let d = nu.dim();
    if basis.is_empty() || basis.len() >= d || basis.iter().any(|b| b.len() != d) {
        return Err(EstimatorError::Invalid("V must be a proper nonzero subspace of R^d".into()));
    }
    let q = DMatrix::from_columns(basis).qr().q();
    let lines: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut l = DVector::zeros(d);
            walk(nu, &[n_max], &mut r, |_, g| l = top_left(g));
            let proj = &q * (q.transpose() * &l);
            (&l - proj).norm() / l.norm()
        })
        .collect();
    Ok(r_grid
        .iter()
        .map(|&r| {
            let hits = lines.iter().filter(|&&x| x <= r).count();
            let (lo, hi) = wilson_interval(hits, trials, Z95);
            RegularityPoint { r, hits, trials, fraction: hits as f64 / trials as f64, lo, hi }
        })
        .collect())
}

/// Escape rates of every requested gap and the estimated set `Θ̂`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiGap {
    pub sigmas: Vec<SigmaEstimate>,
    /// The `j` whose interval lies strictly above 0 and whose mean clears
    /// [`ESCAPE_FLOOR`].
    pub theta: Vec<usize>,
}

/// `σ̂_j` for each `j` via `sqz(·, j)` on exterior powers; never errors on
/// non-escaping gaps, which simply fall outside `Θ̂`.
pub fn multi_gap(
    nu: &MeasureSpec,
    js: &[usize],
    n_grid: &[usize],
    trials: usize,
    rng: &RngStream,
) -> Result<MultiGap> {
    check_grid(n_grid, trials)?;
    let d = nu.dim();
    if js.is_empty() || js.iter().any(|&j| j == 0 || j >= d) {
        return Err(EstimatorError::Invalid("every j must satisfy 1 <= j < d".into()));
    }
    let paths = sqz_paths(nu, js, n_grid, trials, rng);
    let sigmas: Vec<SigmaEstimate> =
        js.iter().enumerate().map(|(i, &j)| sigma_from_paths(i, j, n_grid, &paths)).collect();
    let theta = sigmas.iter().filter(|s| s.ci.0 > 0.0 && s.sigma > ESCAPE_FLOOR).map(|s| s.j).collect();
    Ok(MultiGap { sigmas, theta })
}

/// Tails `t ↦ η(t, +∞)` of (sub-)probability laws on `[0, +∞)`, closed under
/// the appendix operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Tail {
    Empirical(EmpiricalTail),
    /// `c·η` for `0 ≤ c ≤ 1`, a sub-probability.
    Scaled(Box<Tail>, f64),
    /// `⌈η⌉`: the missing mass is put at 0.
    Trunk(Box<Tail>),
    /// `B ∨ η`: mass below `B` is pushed up to `B`.
    PushUp(Box<Tail>, f64),
    /// `η^{↑k}(t) = min{1, k·η(t/k)}`.
    CoarseConv(Box<Tail>, usize),
    /// `G_α{k} = α^k(1−α)` on `ℕ`.
    Geometric(f64),
    /// `min{1, (s/t)^a}`.
    Power { scale: f64, exponent: f64 },
    /// `min{1, Σ_{k<terms} C e^{−βk} η(t/k)}`, see [`zeta_tail`].
    Zeta { base: Box<Tail>, c: f64, beta: f64, terms: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentKind {
    /// `M_p(η) = ∫_0^∞ t^{p−1} η(t, ∞) dt`.
    Strong,
    /// `sup_t t^p η(t, ∞)`.
    Weak,
}

pub fn trunk(eta: Tail) -> Tail {
    Tail::Trunk(Box::new(eta))
}

pub fn push_up(eta: Tail, b: f64) -> Tail {
    Tail::PushUp(Box::new(eta), b)
}

pub fn coarse_conv(eta: Tail, k: usize) -> Tail {
    assert!(k >= 1, "coarse convolution needs k >= 1");
    Tail::CoarseConv(Box::new(eta), k)
}

pub fn geometric(alpha: f64) -> Tail {
    assert!((0.0..1.0).contains(&alpha), "geometric parameter must lie in [0, 1)");
    Tail::Geometric(alpha)
}

/// `t ↦ min{1, Σ_{k≥1} C e^{−βk} N(t/k)}`, truncated at the first `k` whose
/// coefficient `C e^{−βk}` drops below `1e-12`.
pub fn zeta_tail(n_tail: Tail, c: f64, beta: f64) -> Tail {
    assert!(c > 0.0 && beta > 0.0, "zeta tail needs C, beta > 0");
    let terms = (((c.ln() + 12.0 * std::f64::consts::LN_10) / beta).floor().max(0.0) as usize) + 1;
    Tail::Zeta { base: Box::new(n_tail), c, beta, terms }
}

/// `Σ_{k≥1} C e^{−βk} k^p`, the factor in the moment bound for [`zeta_tail`].
pub fn zeta_moment_factor(c: f64, beta: f64, p: f64) -> f64 {
    let mut sum = 0.0;
    for k in 1.. {
        let term = c * (-beta * k as f64).exp() * (k as f64).powf(p);
        sum += term;
        if k as f64 * beta > p && term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Geometric terms beyond this are below `1e-17`.
fn geometric_support(alpha: f64) -> usize {
    if alpha <= 0.0 {
        1
    } else {
        ((-17.0 * std::f64::consts::LN_10) / alpha.ln()).ceil() as usize + 1
    }
}

impl Tail {
    /// `η(t, +∞)`, right-continuous and non-increasing.
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Tail::Empirical(e) => e.eval(t),
            Tail::Scaled(eta, c) => c * eta.eval(t),
            Tail::Trunk(eta) => {
                if t < 0.0 {
                    1.0
                } else {
                    eta.eval(t).min(1.0)
                }
            }
            Tail::PushUp(eta, b) => {
                if t < *b {
                    1.0
                } else {
                    eta.eval(t)
                }
            }
            Tail::CoarseConv(eta, k) => (*k as f64 * eta.eval(t / *k as f64)).min(1.0),
            Tail::Geometric(alpha) => {
                if t < 0.0 {
                    1.0
                } else {
                    alpha.powf(t.floor() + 1.0)
                }
            }
            Tail::Power { scale, exponent } => {
                if t <= *scale {
                    1.0
                } else {
                    (scale / t).powf(*exponent)
                }
            }
            Tail::Zeta { base, c, beta, terms } => {
                let mut s = 0.0;
                for k in 1..*terms {
                    let k = k as f64;
                    s += c * (-beta * k).exp() * base.eval(t / k);
                }
                s.min(1.0)
            }
        }
    }

    /// Jump points on `(0, ∞)` when the tail is a step function whose
    /// remaining mass beyond the last point is negligible; `None` otherwise.
    fn breakpoints(&self) -> Option<Vec<f64>> {
        match self {
            Tail::Empirical(e) => {
                if e.sample().iter().any(|x| x.is_infinite()) {
                    return None;
                }
                Some(e.sample().iter().copied().filter(|&x| x > 0.0).collect())
            }
            Tail::Scaled(eta, _) | Tail::Trunk(eta) => eta.breakpoints(),
            Tail::PushUp(eta, b) => {
                let mut v: Vec<f64> = eta.breakpoints()?.into_iter().filter(|x| x > b).collect();
                if *b > 0.0 {
                    v.push(*b);
                }
                Some(v)
            }
            Tail::CoarseConv(eta, k) => Some(eta.breakpoints()?.into_iter().map(|x| x * *k as f64).collect()),
            Tail::Geometric(alpha) => Some((1..=geometric_support(*alpha)).map(|j| j as f64).collect()),
            Tail::Power { .. } => None,
            Tail::Zeta { base, terms, .. } => {
                let b = base.breakpoints()?;
                Some((1..*terms).flat_map(|k| b.iter().map(move |x| x * k as f64)).collect())
            }
        }
    }

    /// Strong or weak `L^p` moment; `+inf` when it diverges.
    ///
    /// Step tails are integrated exactly between consecutive jump points.
    /// Other tails (those built on [`Tail::Power`]) use the trapezoid rule in
    /// `log t` on 8000 points spanning `[1e-8, 1e12]`, and are declared
    /// divergent when the integrand has not decayed below `1e-12` of the
    /// total at the right end.
    pub fn moment(&self, p: f64, kind: MomentKind) -> f64 {
        assert!(p > 0.0, "moments need p > 0");
        if let Tail::Power { scale, exponent } = self {
            return match kind {
                MomentKind::Strong if p < *exponent => {
                    scale.powf(p) / p + scale.powf(p) / (exponent - p)
                }
                MomentKind::Weak if p <= *exponent => scale.powf(p),
                _ => f64::INFINITY,
            };
        }
        match self.breakpoints() {
            Some(mut b) => {
                b.push(0.0);
                b.sort_by(f64::total_cmp);
                b.dedup();
                // Heights are read mid-interval: jump points of derived tails
                // (`k·x`, `x/k` round trips) are only known up to rounding.
                let last = *b.last().expect("contains 0");
                if self.eval(2.0 * last + 1.0) > 1e-15 {
                    return f64::INFINITY;
                }
                let mut acc: f64 = 0.0;
                for w in b.windows(2) {
                    let h = self.eval(0.5 * (w[0] + w[1]));
                    acc = match kind {
                        MomentKind::Strong => acc + h * (w[1].powf(p) - w[0].powf(p)) / p,
                        MomentKind::Weak => acc.max(h * w[1].powf(p)),
                    };
                }
                acc
            }
            None => self.numeric_moment(p, kind),
        }
    }

    fn numeric_moment(&self, p: f64, kind: MomentKind) -> f64 {
        const POINTS: usize = 8000;
        let (a, b) = ((1e-8f64).ln(), (1e12f64).ln());
        let h = (b - a) / (POINTS - 1) as f64;
        let f = |i: usize| {
            let t = (a + h * i as f64).exp();
            t.powf(p) * self.eval(t)
        };
        let values: Vec<f64> = (0..POINTS).map(f).collect();
        match kind {
            MomentKind::Weak => {
                let m = values.iter().copied().fold(0.0, f64::max);
                if values[POINTS - 1] >= m * (1.0 - 1e-9) && m > 0.0 {
                    f64::INFINITY
                } else {
                    m
                }
            }
            MomentKind::Strong => {
                let total: f64 = h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[POINTS - 1]));
                if values[POINTS - 1] > 1e-12 * total {
                    f64::INFINITY
                } else {
                    total
                }
            }
        }
    }
}

/// One row of a serialized run: statistic `name` at grid value `index`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub index: f64,
    pub statistic: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Flat form of any estimator result: rows for the CSV, scalars for the
/// structured summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub index_name: String,
    pub rows: Vec<SummaryRow>,
    pub scalars: Vec<(String, f64)>,
}

impl RunSummary {
    pub fn new(index_name: &str) -> Self {
        RunSummary { index_name: index_name.into(), ..Default::default() }
    }

    pub fn row(&mut self, index: f64, statistic: &str, value: f64, lo: f64, hi: f64) {
        self.rows.push(SummaryRow { index, statistic: statistic.into(), value, lo, hi });
    }

    pub fn scalar(&mut self, name: &str, value: f64) {
        self.scalars.push((name.into(), value));
    }
}

impl SigmaEstimate {
    pub fn summary(&self) -> RunSummary {
        let mut s = RunSummary::new("n");
        let name = format!("sqz{}_over_n", self.j);
        for p in &self.per_n {
            s.row(p.n as f64, &name, p.mean, p.lo, p.hi);
        }
        s.scalar("sigma", self.sigma);
        s.scalar("sigma_lo", self.ci.0);
        s.scalar("sigma_hi", self.ci.1);
        s.scalar("stabilized", self.stabilized as u8 as f64);
        s
    }
}

/// Summary of several large-deviation fits.
pub fn ldp_summary(fits: &[LdpFit]) -> RunSummary {
    let mut s = RunSummary::new("n");
    for (i, f) in fits.iter().enumerate() {
        for p in &f.points {
            let (lo, hi) = wilson_interval(p.hits, p.trials, Z95);
            s.row(p.n as f64, &format!("p_alpha{i}"), p.p_hat, lo, hi);
        }
        s.scalar(&format!("alpha{i}"), f.alpha);
        s.scalar(&format!("beta{i}"), f.beta);
        s.scalar(&format!("beta{i}_se"), f.beta_se);
        s.scalar(&format!("log_c{i}"), f.intercept);
        s.scalar(&format!("p_value{i}"), f.p_value);
    }
    s
}

impl ConvergenceCurve {
    pub fn summary(&self, statistic: &str) -> RunSummary {
        let mut s = RunSummary::new("n");
        for p in &self.points {
            s.row(p.n as f64, statistic, p.median, p.q10, p.q90);
        }
        s.scalar("n_max", self.n_max as f64);
        s.scalar("rate", self.rate);
        s.scalar("rate_se", self.rate_se);
        s
    }
}

impl TailCurve {
    /// Median and 99th percentile per `n`, with the 1% and 90% quantiles as
    /// the interval columns of the median row.
    pub fn summary(&self, statistic: &str) -> RunSummary {
        let mut s = RunSummary::new("n");
        for (i, t) in self.tails.iter().enumerate() {
            let n = self.n_grid[i] as f64;
            if t.is_empty() {
                s.row(n, statistic, f64::NAN, f64::NAN, f64::NAN);
                continue;
            }
            s.row(n, &format!("{statistic}_median"), t.quantile(0.5), t.quantile(0.01), t.quantile(0.9));
            s.row(n, &format!("{statistic}_q99"), t.quantile(0.99), f64::NAN, f64::NAN);
            s.row(n, "excluded", self.excluded[i] as f64, f64::NAN, f64::NAN);
        }
        s
    }
}

pub fn regularity_summary(points: &[RegularityPoint]) -> RunSummary {
    let mut s = RunSummary::new("r");
    for p in points {
        s.row(p.r, "mass", p.fraction, p.lo, p.hi);
    }
    s
}

impl MultiGap {
    pub fn summary(&self) -> RunSummary {
        let mut s = RunSummary::new("n");
        for est in &self.sigmas {
            let sub = est.summary();
            s.rows.extend(sub.rows);
            s.scalar(&format!("sigma{}", est.j), est.sigma);
            s.scalar(&format!("sigma{}_lo", est.j), est.ci.0);
            s.scalar(&format!("sigma{}_hi", est.j), est.ci.1);
        }
        s.scalar("theta_size", self.theta.len() as f64);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng() -> RngStream {
        RngStream::new(5, 0)
    }

    #[test]
    fn dirac_diagonal_escapes_at_unit_rate() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[1f64.exp(), 1.0]));
        let est = estimate_sigma(&nu, &[10, 50, 200], 4, &rng()).unwrap();
        assert_relative_eq!(est.sigma, 1.0, epsilon = 1e-12);
        assert!(est.se < 1e-12 && est.stabilized);
    }

    #[test]
    fn rotation_dirac_is_flagged() {
        let nu = MeasureSpec::dirac(Matrix::rotation(0.7));
        assert!(matches!(estimate_sigma(&nu, &[50], 3, &rng()), Err(EstimatorError::NonProximal { .. })));
    }

    #[test]
    fn grid_is_validated() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[2.0, 1.0]));
        assert!(estimate_sigma(&nu, &[5, 5], 3, &rng()).is_err());
        assert!(estimate_sigma(&nu, &[], 3, &rng()).is_err());
        assert!(estimate_sigma(&nu, &[5], 0, &rng()).is_err());
    }

    #[test]
    fn unimodular_sqz_is_twice_log_norm() {
        let nu = MeasureSpec::bundled("sl2_hyperbolic").unwrap();
        let s = estimate_sigma(&nu, &[40], 50, &rng()).unwrap();
        let l = top_exponent(&nu, 40, 50, &rng()).unwrap();
        assert_relative_eq!(s.sigma, 2.0 * l.mean, max_relative = 1e-9);
    }

    #[test]
    fn ldp_without_exceedances_reports_infinite_rate() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
        let fits = ldp_curve(&nu, &[0.0, 2.0], &[5, 10, 20], 50, &rng()).unwrap();
        assert_eq!(fits[0].beta, f64::INFINITY);
        // above the escape rate every trial exceeds: p̂ = 1 everywhere
        assert!(fits[1].points.iter().all(|p| p.p_hat == 1.0));
    }

    #[test]
    fn limit_line_of_diagonal_dirac_is_first_axis() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
        let ll = limit_line(&nu, 3, &[1, 5, 10], 30, &rng()).unwrap();
        assert!(ll.curve.points.iter().all(|p| p.median == 0.0));
        assert!(ll.lines.iter().all(|l| (l[0].abs() - 1.0).abs() < 1e-15));
        assert_eq!(ll.curve.rate, f64::INFINITY);
    }

    #[test]
    fn image_of_first_axis_stays_put() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
        let c = image_convergence(&nu, &DVector::from_vec(vec![1.0, 0.0]), 2, &[1, 4], 10, &rng()).unwrap();
        assert!(c.points.iter().all(|p| p.median == 0.0));
    }

    #[test]
    fn image_in_kernel_is_an_error() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[1.0, 0.0]));
        let v = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(image_convergence(&nu, &v, 2, &[1, 2], 3, &rng()), Err(EstimatorError::AllKernel));
    }

    #[test]
    fn rotation_has_no_proximal_products() {
        let nu = MeasureSpec::dirac(Matrix::rotation(0.7));
        let e = eigen_convergence(&nu, 3, &[2, 5], 5, &rng()).unwrap();
        assert!(e.prox_fraction.iter().all(|&f| f == 0.0));
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
        let e = eigen_convergence(&nu, 3, &[2, 5], 9, &rng()).unwrap();
        assert!(e.prox_fraction.iter().all(|&f| f == 1.0));
        assert!(e.curve.points.iter().all(|p| p.median < 1e-15));
    }

    #[test]
    fn dual_coefficient_has_no_gap() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let c = coefficient_gap(&nu, &e1, &e1, &[1, 10, 100], 2, &rng()).unwrap();
        for t in &c.tails {
            assert!(t.sample().iter().all(|x| x.abs() < 1e-12));
        }
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        let c = coefficient_gap(&nu, &e2, &e1, &[3], 2, &rng()).unwrap();
        assert_eq!(c.excluded, vec![2]);
    }

    #[test]
    fn functional_orthogonal_to_limit_grows_linearly() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
        let f = DVector::from_vec(vec![0.0, 1.0]);
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let c = coefficient_gap(&nu, &f, &v, &[5, 10], 1, &rng()).unwrap();
        // log(‖v‖ 3^n / 1)
        for (t, n) in c.tails.iter().zip([5.0, 10.0]) {
            assert_relative_eq!(t.sample()[0], 0.5 * 2f64.ln() + n * 3f64.ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn spectral_ratio_of_normal_and_jordan_atoms() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 0.5]));
        let c = spectral_ratio(&nu, &[1, 7], 2, &rng()).unwrap();
        assert!(c.tails.iter().all(|t| t.sample().iter().all(|x| x.abs() < 1e-12)));
        let nu = MeasureSpec::dirac(Matrix::from_rows(2, &[1.0, 1.0, 0.0, 1.0]));
        let c = spectral_ratio(&nu, &[4, 16, 64], 1, &rng()).unwrap();
        let q = c.quantiles(0.5);
        assert!(q[0] < q[1] && q[1] < q[2]);
        // ‖J^n‖ = n/2 + √(1 + n²/4)
        assert_relative_eq!(q[2], (32.0f64 + (1.0f64 + 1024.0).sqrt()).ln(), max_relative = 1e-6);
    }

    #[test]
    fn whole_space_has_full_mass() {
        let nu = MeasureSpec::bundled("rot_diag_d3").unwrap();
        let v = vec![DVector::from_vec(vec![1.0, 0.0, 0.0])];
        let pts = stationary_regularity(&nu, &v, &[1.0, 0.0], 20, 20, &rng()).unwrap();
        assert_eq!(pts[0].hits, 20);
        assert_eq!(pts[1].hits, 0);
    }

    #[test]
    fn multi_gap_of_diagonal_dirac() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 2.0, 1.0]));
        let m = multi_gap(&nu, &[1, 2], &[10, 40], 2, &rng()).unwrap();
        assert_relative_eq!(m.sigmas[0].sigma, 1.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(m.sigmas[1].sigma, 2f64.ln(), max_relative = 1e-12);
        assert_eq!(m.theta, vec![1, 2]);
    }

    #[test]
    fn empirical_tail_is_right_continuous() {
        let t = EmpiricalTail::new(vec![1.0, 2.0, 2.0, f64::NAN, 4.0]);
        assert_eq!(t.len(), 4);
        assert_eq!(t.eval(0.5), 1.0);
        assert_eq!(t.eval(1.0), 0.75);
        assert_eq!(t.eval(2.0), 0.25);
        assert_eq!(t.eval(4.0), 0.0);
    }

    #[test]
    fn trunk_puts_missing_mass_at_zero() {
        let half = Tail::Scaled(Box::new(Tail::Empirical(EmpiricalTail::new(vec![1.0, 3.0]))), 0.5);
        let t = trunk(half);
        assert_eq!(t.eval(-1e-9), 1.0);
        assert_eq!(t.eval(0.0), 0.5);
        assert_eq!(t.eval(2.0), 0.25);
    }

    #[test]
    fn push_up_and_geometric_tails() {
        let g = geometric(0.5);
        assert_eq!(g.eval(0.0), 0.5);
        assert_eq!(g.eval(2.5), 0.125);
        let p = push_up(g.clone(), 2.0);
        assert_eq!(p.eval(1.9), 1.0);
        assert_eq!(p.eval(2.0), 0.125);
        // E G = α/(1−α)
        assert_relative_eq!(g.moment(1.0, MomentKind::Strong), 1.0, max_relative = 1e-12);
        // M_2 = E G²/2 with E G² = α(1+α)/(1−α)²
        assert_relative_eq!(g.moment(2.0, MomentKind::Strong), 1.5, max_relative = 1e-12);
    }

    #[test]
    fn empirical_moments_are_exact() {
        let t = Tail::Empirical(EmpiricalTail::new(vec![1.0, 2.0, 4.0]));
        // M_p = E X^p / p
        assert_relative_eq!(t.moment(2.0, MomentKind::Strong), 21.0 / 6.0, max_relative = 1e-12);
        // sup t² η(t): approached at t → 4⁻ with η = 1/3
        assert_relative_eq!(t.moment(2.0, MomentKind::Weak), 16.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn power_tail_moments_and_divergence() {
        let t = Tail::Power { scale: 1.0, exponent: 2.0 };
        assert_relative_eq!(t.moment(1.0, MomentKind::Strong), 2.0, max_relative = 1e-12);
        assert_eq!(t.moment(2.0, MomentKind::Strong), f64::INFINITY);
        assert_eq!(t.moment(2.0, MomentKind::Weak), 1.0);
        // numeric path on a composite: (1·η)^{↑1} = η
        let c = coarse_conv(t.clone(), 1);
        assert_relative_eq!(c.moment(1.0, MomentKind::Strong), 2.0, max_relative = 1e-4);
        assert_eq!(c.moment(2.5, MomentKind::Strong), f64::INFINITY);
    }

    #[test]
    fn zeta_of_point_mass_is_a_geometric_series() {
        let dirac1 = Tail::Empirical(EmpiricalTail::new(vec![1.0]));
        let (c, beta) = (0.3, 0.7);
        let z = zeta_tail(dirac1, c, beta);
        for t in [0.0f64, 0.5, 1.0, 2.3, 7.0, 20.0] {
            let first = t.floor() + 1.0;
            let closed = (c * (-beta * first).exp() / (1.0 - (-beta).exp())).min(1.0);
            assert!((z.eval(t) - closed).abs() < 1e-11, "t = {t}");
        }
        let zero = Tail::Empirical(EmpiricalTail::new(vec![0.0; 3]));
        let z = zeta_tail(zero, 2.0, 0.5);
        assert_eq!(z.eval(1e-9), 0.0);
    }

    #[test]
    fn summaries_have_increasing_grids() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[2.0, 1.0]));
        let s = estimate_sigma(&nu, &[3, 6, 9], 2, &rng()).unwrap().summary();
        assert!(s.rows.windows(2).all(|w| w[0].index < w[1].index));
        assert!(s.scalars.iter().any(|(k, _)| k == "sigma"));
    }
}
