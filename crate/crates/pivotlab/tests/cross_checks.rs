//! Cross-module consistency checks on small instances.

use nalgebra::{DMatrix, DVector};

use pivotlab::alignment::{AllRelated, CoarseAlignment};
use pivotlab::estimators::{
    eigen_convergence, estimate_sigma, image_convergence, ldp_curve, limit_line, multi_gap, stationary_regularity,
};
use pivotlab::measures::{haar_rotation, MeasureSpec, RngStream};
use pivotlab::pivot::{extract_r, ping_pong_extract, run_pivot, verify_extraction, J_STAB};
use pivotlab::projgeo::{jacobi_svd, vec_dist, Matrix};
use pivotlab::schottky::{build_schottky, validate_schottky, SchottkyParams, SchottkySystem};

fn conjugate(nu: &MeasureSpec, r: &DMatrix<f64>) -> MeasureSpec {
    let atoms: Vec<(Matrix, f64)> = nu
        .atoms()
        .unwrap()
        .iter()
        .zip(nu.weights().unwrap())
        .map(|(a, &w)| (Matrix::scaled(r * a.entries() * r.transpose(), a.log_scale()), w))
        .collect();
    MeasureSpec::finite(atoms).unwrap()
}

#[test]
fn limit_line_is_equivariant_under_conjugation() {
    let nu = MeasureSpec::bundled("sl2_hyperbolic").unwrap();
    let r = haar_rotation(2, &mut RngStream::new(1, 0));
    let rotated = conjugate(&nu, &r);
    let grid = [5, 10];
    let rng = RngStream::new(2, 0);
    // Atom indices are drawn identically, so trials correspond one to one.
    let a = limit_line(&nu, 50, &grid, 40, &rng).unwrap();
    let b = limit_line(&rotated, 50, &grid, 40, &rng).unwrap();
    for (la, lb) in a.lines.iter().zip(&b.lines) {
        let moved = &r * DVector::from_column_slice(la);
        assert!(vec_dist(&moved, &DVector::from_column_slice(lb)) < 1e-6);
    }
}

#[test]
fn diagonal_image_distance_has_closed_form() {
    let nu = MeasureSpec::dirac(Matrix::diag(&[3.0, 1.0]));
    let v = DVector::from_vec(vec![1.0, 1.0]);
    // Below n ≈ 5 the factor (1 + 9^{−n})^{−1/2} still bends the log-curve.
    let grid: Vec<usize> = (5..=15).collect();
    let c = image_convergence(&nu, &v, 3, &grid, 40, &RngStream::new(3, 0)).unwrap();
    for p in &c.points {
        let n = p.n as i32;
        let exact = 3f64.powi(-n) / (1.0 + 9f64.powi(-n)).sqrt();
        assert!((p.median - exact).abs() < 1e-9 && (p.median / exact - 1.0).abs() < 1e-9, "n = {n}");
    }
    assert!((c.rate - 3f64.ln()).abs() < 1e-4, "rate {}", c.rate);
    let e = eigen_convergence(&nu, 3, &grid, 40, &RngStream::new(3, 0)).unwrap();
    assert!(e.curve.points.iter().all(|p| p.median == 0.0));
    assert!(e.prox_fraction.iter().all(|&f| f == 1.0));
}

#[test]
fn ldp_at_zero_and_above_the_speed() {
    // Both atoms squeeze and every product is aligned: sqz(γ̄_n) ≥ n log 3 > 0.
    let nu = MeasureSpec::uniform(vec![Matrix::diag(&[3.0, 1.0]), Matrix::diag(&[4.0, 1.0])]).unwrap();
    let fits = ldp_curve(&nu, &[0.0, 3.0], &[5, 10, 20], 500, &RngStream::new(4, 0)).unwrap();
    assert!(fits[0].points.iter().all(|p| p.hits == 0));
    assert_eq!(fits[0].beta, f64::INFINITY);
    // Above the speed (log 3 + log 4)/2 ≈ 1.24 nearly every trial falls below αn.
    assert!(fits[1].points.last().unwrap().p_hat > 0.99);
}

#[test]
fn flag_gaps_agree_with_direct_singular_values() {
    // SL(3): two generic unimodular atoms.
    let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 1.0]);
    let nu = MeasureSpec::uniform(vec![Matrix::new(a), Matrix::new(b)]).unwrap();
    let grid = [10, 20];
    let trials = 800;
    let rng = RngStream::new(5, 0);
    let mg = multi_gap(&nu, &[1, 2], &grid, trials, &rng).unwrap();
    // Second path: dense renormalized products and an SVD at n = 20. The
    // smallest singular value is below double precision relative to the top
    // one, so it comes from the accumulated log-determinant instead.
    let mut gaps = [Vec::new(), Vec::new()];
    for t in 0..trials as u64 {
        let mut r = rng.derive(t);
        let mut acc = DMatrix::<f64>::identity(3, 3);
        let mut log_det = 0.0;
        for _ in 0..20 {
            let step = nu.sample(&mut r).entries().clone();
            log_det += step.determinant().abs().ln();
            acc = acc * step;
            let s = acc.amax();
            acc /= s;
            log_det -= 3.0 * s.ln();
        }
        let s = jacobi_svd(&acc).values;
        let log_s2 = log_det - s[0].ln() - s[1].ln();
        gaps[0].push((s[0] / s[1]).ln() / 20.0);
        gaps[1].push((s[1].ln() - log_s2) / 20.0);
    }
    for j in 0..2 {
        let mean = gaps[j].iter().sum::<f64>() / trials as f64;
        let est = &mg.sigmas[j];
        assert!((est.sigma - mean).abs() < 1e-6, "j = {}: {} vs {mean}", j + 1, est.sigma);
    }
    assert_eq!(mg.theta, vec![1, 2]);
}

#[test]
fn rotations_have_no_escaping_gap() {
    let nu = MeasureSpec::dirac(Matrix::new(haar_rotation(3, &mut RngStream::new(6, 0))));
    let mg = multi_gap(&nu, &[1, 2], &[10, 20], 20, &RngStream::new(6, 1)).unwrap();
    assert!(mg.theta.is_empty());
    assert!(estimate_sigma(&nu, &[10, 20], 20, &RngStream::new(6, 2)).is_err());
}

#[test]
fn near_dirac_mass_avoids_the_orthogonal_hyperplane() {
    // Products of diag(5, 1, 1) perturbed slightly: l∞ sits near e1.
    let d = |x: f64| Matrix::new(DMatrix::from_row_slice(3, 3, &[5.0, x, 0.0, x, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let nu = MeasureSpec::uniform(vec![d(0.01), d(-0.01)]).unwrap();
    let plane = vec![DVector::from_vec(vec![0.0, 1.0, 0.0]), DVector::from_vec(vec![0.0, 0.0, 1.0])];
    let pts = stationary_regularity(&nu, &plane, &[0.1, 0.5, 1.0], 200, 30, &RngStream::new(7, 0)).unwrap();
    assert_eq!(pts[0].hits, 0);
    assert_eq!(pts[1].hits, 0);
    assert_eq!(pts[2].hits, 200);
}

fn fan8() -> SchottkySystem {
    let nu = MeasureSpec::bundled("fan8").unwrap();
    let params = SchottkyParams { rho: 0.15, ..Default::default() };
    build_schottky(&nu, &params, &RngStream::new(8, 0)).unwrap().0
}

#[test]
fn schottky_system_survives_fresh_probes_and_text_round_trip() {
    let sys = fan8();
    let again = SchottkySystem::parse(&sys.to_text()).unwrap();
    assert_eq!(again.to_text(), sys.to_text());
    let report = validate_schottky(&again, 2000, &RngStream::new(9, 0));
    assert!(report.passed && report.worst_margin >= 0.0);
}

#[test]
fn pivoting_index_is_zero_when_everything_aligns() {
    let sys = fan8();
    for t in 0..200 {
        let mut r = RngStream::new(10, t);
        let g = ping_pong_extract(&sys, 100, &mut r);
        // Every pair related and no penalty: the first check already stops.
        let idx = extract_r(&g, &sys, &AllRelated, None, 0.0, &mut r);
        assert_eq!(idx.value, 0);
    }
}

#[test]
fn traces_are_reproducible_and_dump_in_line_format() {
    let sys = fan8().with_alpha(0.5).unwrap();
    let rel = CoarseAlignment { eps: sys.eps() };
    let run = |seed| {
        let mut r = RngStream::new(11, seed);
        let g = ping_pong_extract(&sys, 1500, &mut r);
        let trace = run_pivot(&g, &sys, &rel, J_STAB, &mut r).unwrap();
        (g, trace)
    };
    let (g, a) = run(0);
    let (_, b) = run(0);
    assert_eq!(a.dump(), b.dump());
    let dump = a.dump();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), a.events.len() + 1);
    for (j, line) in lines[..lines.len() - 1].iter().enumerate() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), j);
        assert_eq!(f[1].parse::<usize>().unwrap(), a.m[j]);
        match f[2] {
            "advance" => assert_eq!(f.len(), 3),
            // A backtrack from level 0 stays at 0 and reports depth 0.
            "backtrack" => assert_eq!(a.m[j] - f[3].parse::<usize>().unwrap(), a.m[j + 1]),
            other => panic!("unknown event {other}"),
        }
    }
    let p: Vec<usize> = lines.last().unwrap().split(' ').skip(1).map(|x| x.parse().unwrap()).collect();
    assert_eq!(p, a.lengths);
    assert_eq!(p.iter().sum::<usize>(), g.grouped_len());
    let report = verify_extraction(&a, &g, &sys, 30, &mut RngStream::new(11, 99));
    assert!(report.violations().is_empty(), "{:?}", report.violations());
}
