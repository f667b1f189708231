//! Large-deviation bookkeeping on synthetic sequences: shifts, minima,
//! maxima, sums, random time changes and their inverses keep exponentially
//! small lower deviations, and the current-step bounds of renewal sequences.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use pivotlab::measures::RngStream;
use pivotlab::pivot::geometric;
use pivotlab::stats::{weighted_line_fit, wilson_interval};

const TRIALS: usize = 20_000;
const GRID: [usize; 6] = [10, 20, 30, 40, 50, 60];

/// Partial sums `S_0, …, S_N` of i.i.d. exponential steps with mean `mean`.
fn walk(mean: f64, n: usize, rng: &mut RngStream) -> Vec<f64> {
    let exp = Exp::new(1.0 / mean).unwrap();
    let mut s = vec![0.0; n + 1];
    for i in 1..=n {
        s[i] = s[i - 1] + exp.sample(rng);
    }
    s
}

/// Fitted decay rate of `P(x_n ≤ αn)` along [`GRID`] and its standard error.
/// `sample(n_max, rng)` returns a whole path `x_0..=x_{n_max}`.
fn lower_deviation_rate<F>(alpha: f64, seed: u64, sample: F) -> (f64, f64, Vec<usize>)
where
    F: Fn(usize, &mut RngStream) -> Vec<f64>,
{
    let base = RngStream::new(seed, 0);
    let n_max = *GRID.last().unwrap();
    let mut hits = [0usize; GRID.len()];
    // Independent paths per grid point keep the fitted points independent.
    for (i, &n) in GRID.iter().enumerate() {
        for t in 0..TRIALS as u64 {
            let mut rng = base.derive(i as u64).derive(t);
            let x = sample(n_max, &mut rng);
            if x[n] <= alpha * n as f64 {
                hits[i] += 1;
            }
        }
    }
    let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &n) in GRID.iter().enumerate() {
        let h = hits[i];
        if h >= 10 && h < TRIALS {
            let p = h as f64 / TRIALS as f64;
            xs.push(n as f64);
            ys.push(p.ln());
            ws.push(h as f64 / (1.0 - p));
        }
    }
    if xs.len() < 2 {
        // Too few exceedances to fit: the probability is already tiny.
        return (f64::INFINITY, 0.0, hits.to_vec());
    }
    let fit = weighted_line_fit(&xs, &ys, &ws, true);
    (-fit.slope, fit.slope_se, hits.to_vec())
}

fn assert_decays(name: &str, rate: (f64, f64, Vec<usize>)) {
    let (beta, se, hits) = rate;
    assert!(beta - 3.0 * se > 0.0, "{name}: rate {beta} ± {se}, hits {hits:?}");
}

#[test]
fn exponential_walk_has_lower_deviations_below_its_mean() {
    assert_decays("walk", lower_deviation_rate(0.7, 1, |n, r| walk(1.0, n, r)));
}

#[test]
fn shift_by_light_tailed_noise() {
    // y_n = −Exp(1): P(y_n ≤ −t) = e^{−t}, uniformly in n.
    assert_decays(
        "shift",
        lower_deviation_rate(0.7, 2, |n, r| {
            let mut x = walk(1.0, n, r);
            let e = Exp::new(1.0).unwrap();
            for v in x.iter_mut() {
                *v -= e.sample(r);
            }
            x
        }),
    );
}

#[test]
fn minimum_runs_at_the_slower_speed() {
    assert_decays(
        "min",
        lower_deviation_rate(0.45, 3, |n, r| {
            let a = walk(1.0, n, r);
            let b = walk(0.6, n, r);
            a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect()
        }),
    );
}

#[test]
fn maximum_runs_at_the_faster_speed() {
    // Speed max(1, 0.6) = 1: α = 0.8 lies above the slower walk's speed.
    assert_decays(
        "max",
        lower_deviation_rate(0.8, 4, |n, r| {
            let a = walk(1.0, n, r);
            let b = walk(0.6, n, r);
            a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()
        }),
    );
}

#[test]
fn positive_combination_adds_speeds() {
    // 2·(speed 1) + 0.5·(speed 0.6) = 2.3.
    assert_decays(
        "sum",
        lower_deviation_rate(1.9, 5, |n, r| {
            let a = walk(1.0, n, r);
            let b = walk(0.6, n, r);
            a.iter().zip(&b).map(|(x, y)| 2.0 * x + 0.5 * y).collect()
        }),
    );
}

#[test]
fn random_time_change_multiplies_speeds() {
    // k_n = number of successes in n Bernoulli(0.8) trials (speed 0.8),
    // composed with a speed-1 walk: speed 0.8.
    assert_decays(
        "compo",
        lower_deviation_rate(0.6, 6, |n, r| {
            let x = walk(1.0, n, r);
            let mut k = 0;
            let mut out = vec![0.0; n + 1];
            for o in out.iter_mut().skip(1) {
                if r.random::<f64>() < 0.8 {
                    k += 1;
                }
                *o = x[k];
            }
            out
        }),
    );
}

#[test]
fn reciprocal_of_a_fast_sequence_is_slow_from_above() {
    // k_n: walk with mean 2 (speed 2); r_m = max{n : k_n ≤ m} has upper
    // deviations above speed 1/2, i.e. −r_m has lower deviations below −1/2.
    let (beta, se, hits) = lower_deviation_rate(-0.65, 7, |m_max, r| {
        let k = walk(2.0, m_max + 1, r);
        (0..=m_max)
            .map(|m| {
                let rm = k.iter().rposition(|&v| v <= m as f64).unwrap_or(0);
                -(rm as f64)
            })
            .collect()
    });
    assert!(beta - 3.0 * se > 0.0, "reciprocal: {beta} ± {se}, hits {hits:?}");
}

/// Steps `w_k ≥ 1` geometric with `P(w = t) = (1 − q) q^{t−1}`; returns the
/// step straddling `n`.
fn current_step(q: f64, n: usize, rng: &mut RngStream) -> usize {
    let mut total = 0;
    loop {
        let w = 1 + geometric(q, rng);
        if total + w > n {
            return w;
        }
        total += w;
    }
}

#[test]
fn current_step_is_at_most_size_biased() {
    let q = 0.6;
    let trials = 100_000;
    let base = RngStream::new(8, 0);
    for n in [5usize, 17, 40] {
        let mut counts = vec![0usize; 64];
        for t in 0..trials as u64 {
            let w = current_step(q, n, &mut base.derive(n as u64).derive(t));
            counts[w.min(63)] += 1;
        }
        for (t, &c) in counts.iter().enumerate().take(30).skip(1) {
            let h = (1.0 - q) * q.powi(t as i32 - 1);
            let (lo, _) = wilson_interval(c, trials, 4.0);
            assert!(lo <= t as f64 * h, "n = {n}, t = {t}: {lo} > {}", t as f64 * h);
        }
        // Exponential-tail corollary: C = 1/q, β = −log q.
        let (c0, beta) = (1.0 / q, -q.ln());
        for t in 1..30usize {
            let tail: usize = counts[t..].iter().sum();
            let (lo, _) = wilson_interval(tail, trials, 4.0);
            let bound = c0 * (1.0 + t as f64 * beta) / beta.powi(2) * (-beta * t as f64).exp();
            assert!(lo <= bound, "n = {n}, t = {t}: tail {lo} > {bound}");
        }
    }
}

#[test]
fn random_sums_of_light_tailed_steps_are_light_tailed() {
    // w geometric, x_k exponential: the tail of x̄_w decays exponentially.
    let trials = 200_000;
    let base = RngStream::new(9, 0);
    let exp = Exp::new(1.0).unwrap();
    let mut sums: Vec<f64> = (0..trials as u64)
        .map(|t| {
            let mut r = base.derive(t);
            let w = geometric(0.5, &mut r);
            (0..w).map(|_| exp.sample(&mut r)).sum()
        })
        .collect();
    sums.sort_by(f64::total_cmp);
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&t| {
            let above = sums.len() - sums.partition_point(|&s| s <= t);
            (above as f64 / trials as f64).ln()
        })
        .collect();
    let fit = weighted_line_fit(&xs, &ys, &vec![1.0; xs.len()], false);
    // Exact tail here is e^{−t/2}/2.
    assert!((fit.slope + 0.5).abs() < 0.05, "slope {}", fit.slope);
}
