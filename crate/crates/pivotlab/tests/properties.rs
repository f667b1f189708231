//! Property tests for the geometric primitives and the tail calculus.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use pivotlab::estimators::{coarse_conv, geometric, trunk, zeta_tail, EmpiricalTail, Tail};
use pivotlab::projgeo::{jacobi_svd, op_norm, proj_dist, singular_data, sqz, Matrix, ProjPoint};
use pivotlab::stats::wilson_interval;

fn dense(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

fn matrix() -> impl Strategy<Value = Matrix> {
    (2usize..=4).prop_flat_map(|d| (dense(d), -50.0f64..50.0)).prop_map(|(m, s)| Matrix::scaled(m, s))
}

fn matrix_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..=4).prop_flat_map(|d| (dense(d), dense(d))).prop_map(|(a, b)| (Matrix::new(a), Matrix::new(b)))
}

fn point(d: usize) -> impl Strategy<Value = ProjPoint> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
        .prop_map(|v| ProjPoint::new(DVector::from_vec(v)).unwrap())
}

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..20.0, 1..60)
}

proptest! {
    #[test]
    fn stored_entries_have_unit_order_norm(g in matrix()) {
        prop_assume!(!g.is_zero());
        let n = jacobi_svd(g.entries()).values[0];
        prop_assert!((0.5..=2.0).contains(&n), "operator norm of entries {n}");
        let back = g.to_dense();
        let direct = g.entries() * g.log_scale().exp();
        prop_assert!((back - &direct).norm() <= 1e-12 * direct.norm());
    }

    #[test]
    fn log_operator_norm_is_subadditive((a, b) in matrix_pair()) {
        let ab = a.mul(&b);
        prop_assume!(!ab.is_zero());
        prop_assert!(op_norm(&ab) <= op_norm(&a) + op_norm(&b) + 1e-9);
    }

    #[test]
    fn gaps_are_nonnegative_and_transpose_invariant(g in matrix()) {
        for j in 1..g.dim() {
            let s = sqz(&g, j);
            let t = sqz(&g.transpose(), j);
            prop_assert!(s >= 0.0);
            prop_assert!(s == t || (s - t).abs() <= 1e-8 * (1.0 + s.abs()), "j = {j}: {s} vs {t}");
        }
    }

    #[test]
    fn singular_vectors_are_orthonormal(g in matrix()) {
        let sd = singular_data(&g);
        let d = g.dim();
        let id = DMatrix::<f64>::identity(d, d);
        prop_assert!((sd.left.transpose() * &sd.left - &id).amax() < 1e-10);
        prop_assert!((sd.right.transpose() * &sd.right - &id).amax() < 1e-10);
        prop_assert!(sd.log_s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn projective_distance_is_a_metric(
        (x, y, z) in (2usize..=4).prop_flat_map(|d| (point(d), point(d), point(d)))
    ) {
        let (xy, yx) = (proj_dist(&x, &y), proj_dist(&y, &x));
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&xy));
        prop_assert!(proj_dist(&x, &x) < 1e-7);
        prop_assert!(proj_dist(&x, &z) <= xy + proj_dist(&y, &z) + 1e-12);
    }

    #[test]
    fn empirical_tail_is_a_nonincreasing_probability(v in sample(), a in 0.0f64..25.0, b in 0.0f64..25.0) {
        let eta = EmpiricalTail::new(v);
        let (lo, hi) = (a.min(b), a.max(b));
        let (e_lo, e_hi) = (eta.eval(lo), eta.eval(hi));
        prop_assert!((0.0..=1.0).contains(&e_lo) && (0.0..=1.0).contains(&e_hi));
        prop_assert!(e_hi <= e_lo);
    }

    #[test]
    fn tail_operations_dominate_and_stay_probabilities(v in sample(), k in 1usize..6, t in 0.0f64..40.0) {
        let eta = Tail::Empirical(EmpiricalTail::new(v));
        let conv = coarse_conv(eta.clone(), k);
        prop_assert!(conv.eval(t) >= eta.eval(t));
        prop_assert!(conv.eval(t) <= 1.0);
        prop_assert!(trunk(eta.clone()).eval(t) <= 1.0);
        let z = zeta_tail(eta, 2.0, 0.7);
        prop_assert!(z.eval(t + 1.0) <= z.eval(t));
        prop_assert!((0.0..=1.0).contains(&z.eval(t)));
    }

    #[test]
    fn geometric_tail_matches_its_mass_function(alpha in 0.0f64..0.95, k in 0usize..30) {
        // η(k − ½, ∞) = P(X ≥ k) = α^k.
        let g = geometric(alpha);
        prop_assert!((g.eval(k as f64 - 0.5) - alpha.powi(k as i32)).abs() < 1e-12);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(n in 1usize..5000, frac in 0.0f64..=1.0, z in 0.5f64..4.0) {
        let hits = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(hits, n, z);
        let p = hits as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }
}
