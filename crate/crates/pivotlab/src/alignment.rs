//! Coarse alignment `g A^ε h ⇔ ‖gh‖ ≥ ε‖g‖‖h‖`, a finitely described
//! relation sandwiched between two alignment levels, and executable checks
//! for the local-to-global alignment lemmas.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::measures::{haar_orthogonal, RngStream};
use crate::projgeo::{
    cones, log_spectral_radius, op_norm, proj_dist, prox, singular_data, sqz_of_product,
    top_eigenline, vec_dist, Matrix, ProjPoint,
};

/// Additive slack on log-scale conclusions (and absolute slack on distances).
pub const LEMMA_SLACK: f64 = 1e-7;

/// `log‖gh‖ ≥ log ε + log‖g‖ + log‖h‖`; zero matrices are aligned with everything.
pub fn is_aligned(g: &Matrix, h: &Matrix, eps: f64) -> bool {
    alignment_margin(g, h, eps) >= 0.0
}

/// `log‖gh‖ − log ε − log‖g‖ − log‖h‖`; `+inf` when either factor is zero.
pub fn alignment_margin(g: &Matrix, h: &Matrix, eps: f64) -> f64 {
    assert!(eps > 0.0 && eps <= 1.0, "eps must lie in (0, 1]");
    if g.is_zero() || h.is_zero() {
        return f64::INFINITY;
    }
    op_norm(&g.mul(h)) - eps.ln() - op_norm(g) - op_norm(h)
}

/// `log(‖gh‖ / (‖g‖‖h‖))`, the alignment level actually achieved.
pub fn alignment_ratio(g: &Matrix, h: &Matrix) -> f64 {
    alignment_margin(g, h, 1.0)
}

/// Witnesses of sharp alignment: `u ∈ U^ε(h)` and `w ∈ W^ε(g)` with
/// `|w u| ≥ ε‖w‖‖u‖` whenever `g A^ε h`. Returns `(u, w, |wu|/(‖w‖‖u‖))`.
pub fn alignment_witnesses(g: &Matrix, h: &Matrix) -> (DVector<f64>, DVector<f64>, f64) {
    let gh = g.mul(h);
    let sd = singular_data(&gh);
    let x = sd.right.column(0).into_owned();
    let phi = sd.left.column(0).into_owned();
    let u = h.apply(&x);
    let w = g.entries().transpose() * phi;
    let c = w.dot(&u).abs() / (w.norm() * u.norm());
    (u, w, c)
}

/// A binary relation on matrices.
pub trait Relation: Sync {
    fn related(&self, g: &Matrix, h: &Matrix) -> bool;
}

/// The coarse alignment `A^ε` itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseAlignment {
    pub eps: f64,
}

impl Relation for CoarseAlignment {
    fn related(&self, g: &Matrix, h: &Matrix) -> bool {
        is_aligned(g, h, self.eps)
    }
}

/// The full relation: every pair is related.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AllRelated;

impl Relation for AllRelated {
    fn related(&self, _g: &Matrix, _h: &Matrix) -> bool {
        true
    }
}

impl<R: Relation + ?Sized> Relation for &R {
    fn related(&self, g: &Matrix, h: &Matrix) -> bool {
        (**self).related(g, h)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("need 0 < eps1 < eps2 <= 1, got eps1={0}, eps2={1}")]
    BadLevels(f64, f64),
    #[error("net did not reach hole size {target} after {iterations} refinements (last hole {hole})")]
    NetDensity { target: f64, hole: f64, iterations: usize },
}

/// A finitely described relation `A` with `A^{eps2} ⊂ A ⊂ A^{eps1}`.
///
/// One net of unit vectors is used on both sides: as functionals `w_i` and as
/// vectors `u_j` (the dual space is identified with `E`). The class of `g` is
/// the list of levels `n` for which `w_i ∈ W^{nε}(g)`, and likewise for `h`.
#[derive(Clone, Debug)]
pub struct DiscreteAlignment {
    eps1: f64,
    eps2: f64,
    eps: f64,
    levels: usize,
    net: Vec<DVector<f64>>,
    gram: Vec<f64>,
    hole: f64,
}

const NET_POOL: usize = 20_000;
const NET_PROBES: usize = 100_000;
const NET_ROUNDS: usize = 20;

fn random_unit(d: usize, rng: &mut RngStream) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Greedy farthest-point net on the projective space with hole ≤ `target`,
/// checked against independent probes.
pub fn build_net(
    d: usize,
    target: f64,
    rng: &mut RngStream,
) -> Result<(Vec<DVector<f64>>, f64), AlignError> {
    let pool: Vec<DVector<f64>> = (0..NET_POOL).map(|_| random_unit(d, rng)).collect();
    let mut net = vec![pool[0].clone()];
    let mut nearest: Vec<f64> = pool.iter().map(|p| vec_dist(p, &net[0])).collect();
    // Aim a little below the target so the probe check usually succeeds first time.
    let inner = 0.8 * target;
    loop {
        let (far, &hole) = nearest
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty pool");
        if hole <= inner {
            break;
        }
        let p = pool[far].clone();
        for (n, q) in nearest.iter_mut().zip(&pool) {
            *n = n.min(vec_dist(q, &p));
        }
        net.push(p);
    }
    let mut hole = 0.0;
    for _ in 0..NET_ROUNDS {
        hole = 0.0;
        let mut worst = None;
        for _ in 0..NET_PROBES {
            let x = random_unit(d, rng);
            let dist = net.iter().map(|u| vec_dist(&x, u)).fold(f64::INFINITY, f64::min);
            if dist > hole {
                hole = dist;
                worst = Some(x);
            }
        }
        if hole <= target {
            return Ok((net, hole));
        }
        net.push(worst.expect("a probe exceeded the target"));
    }
    Err(AlignError::NetDensity { target, hole, iterations: NET_ROUNDS })
}

/// Builds the discrete relation sandwiched between `A^{eps2}` and `A^{eps1}`.
pub fn build_discrete(
    eps1: f64,
    eps2: f64,
    d: usize,
    rng: &mut RngStream,
) -> Result<DiscreteAlignment, AlignError> {
    if !(0.0 < eps1 && eps1 < eps2 && eps2 <= 1.0) {
        return Err(AlignError::BadLevels(eps1, eps2));
    }
    let eps = (eps2 - eps1) / 4.0;
    let levels = (1.0 / eps).floor() as usize;
    let (net, hole) = build_net(d, eps, rng)?;
    let k = net.len();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = net[i].dot(&net[j]).abs();
        }
    }
    Ok(DiscreteAlignment { eps1, eps2, eps, levels, net, gram, hole })
}

impl DiscreteAlignment {
    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    pub fn eps2(&self) -> f64 {
        self.eps2
    }

    /// Number of net points `k` on each side.
    pub fn net_size(&self) -> usize {
        self.net.len()
    }

    /// Largest probed distance from a point to the net.
    pub fn measured_hole(&self) -> f64 {
        self.hole
    }

    pub fn level_count(&self) -> usize {
        self.levels
    }

    fn level(&self, ratio: f64) -> usize {
        ((ratio / self.eps).floor() as usize).min(self.levels)
    }

    /// `(i, n)` with `n ≥ 1` maximal such that `w_i ∈ W^{nε}(g)`.
    pub fn left_class(&self, g: &Matrix) -> Vec<(usize, usize)> {
        let c = cones(g, 1.0);
        self.net
            .iter()
            .enumerate()
            .map(|(i, w)| (i, self.level(c.w_ratio(w))))
            .filter(|&(_, n)| n >= 1)
            .collect()
    }

    /// `(j, n)` with `n ≥ 1` maximal such that `u_j ∈ U^{nε}(h)`.
    pub fn right_class(&self, h: &Matrix) -> Vec<(usize, usize)> {
        let c = cones(h, 1.0);
        self.net
            .iter()
            .enumerate()
            .map(|(j, u)| (j, self.level(c.u_ratio(u))))
            .filter(|&(_, n)| n >= 1)
            .collect()
    }
}

impl Relation for DiscreteAlignment {
    fn related(&self, g: &Matrix, h: &Matrix) -> bool {
        if g.is_zero() || h.is_zero() {
            return true;
        }
        let left = self.left_class(g);
        let right = self.right_class(h);
        let k = self.net.len();
        let e2 = self.eps * self.eps;
        left.iter().any(|&(i, n1)| {
            right
                .iter()
                .any(|&(j, n2)| self.gram[i * k + j] * (n1 * n2) as f64 * e2 >= self.eps1)
        })
    }
}

/// The local-to-global alignment statements that can be checked numerically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lemma {
    /// `[g, h]`: gap of an aligned product and stability of its image direction.
    Product,
    /// `[f, g, h]`: a squeezing middle factor survives a doubly aligned triple.
    Triple,
    /// `[f, g, h]`: alignment passes from `g` to `gh`.
    Heredity,
    /// `[g_0, …, g_n]`: norm, gap and direction of an aligned chain.
    Chain,
    /// `[g_0, …, g_n]`: every prefix is aligned with the matching suffix.
    PartialProducts,
    /// `[h, g_0, …, g_n]`: left alignment with the first factor passes to the product.
    LeftAlignedChain,
    /// `[γ_{-1}, γ_0, …, γ_{2n}]`: the alternating ping-pong condition.
    Alternating,
    /// `[g]`: a squeezing self-aligned matrix is proximal.
    EigenAlignment,
}

impl Lemma {
    pub const ALL: [Lemma; 8] = [
        Lemma::Product,
        Lemma::Triple,
        Lemma::Heredity,
        Lemma::Chain,
        Lemma::PartialProducts,
        Lemma::LeftAlignedChain,
        Lemma::Alternating,
        Lemma::EigenAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Lemma::Product => "product",
            Lemma::Triple => "triple",
            Lemma::Heredity => "heredity",
            Lemma::Chain => "chain",
            Lemma::PartialProducts => "partial-products",
            Lemma::LeftAlignedChain => "left-aligned-chain",
            Lemma::Alternating => "alternating",
            Lemma::EigenAlignment => "eigen-alignment",
        }
    }
}

impl fmt::Display for Lemma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Lemma {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Lemma::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown lemma '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    NotApplicable { reason: String },
    Pass { margin: f64 },
    Fail { margin: f64, conclusion: String },
}

impl Verdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail { .. })
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaReport {
    pub lemma: Lemma,
    pub verdict: Verdict,
}

/// Accumulates the worst margin over a lemma's conclusions.
struct Conclusions {
    worst: f64,
    which: String,
}

impl Conclusions {
    fn new() -> Self {
        Conclusions { worst: f64::INFINITY, which: String::new() }
    }

    fn record(&mut self, name: &str, margin: f64) {
        if margin < self.worst {
            self.worst = margin;
            self.which = name.to_string();
        }
    }

    /// Log-scale `lhs ≥ rhs`.
    fn ge(&mut self, name: &str, lhs: f64, rhs: f64) {
        let m = if lhs == f64::INFINITY || rhs == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            lhs - rhs
        };
        self.record(name, m);
    }

    /// Distance `d ≤ bound`.
    fn le(&mut self, name: &str, d: f64, bound: f64) {
        self.record(name, bound - d);
    }

    fn aligned(&mut self, name: &str, g: &Matrix, h: &Matrix, eps: f64) {
        self.record(name, alignment_margin(g, h, eps));
    }

    fn verdict(self) -> Verdict {
        if self.worst >= -LEMMA_SLACK {
            Verdict::Pass { margin: self.worst }
        } else {
            Verdict::Fail { margin: self.worst, conclusion: self.which }
        }
    }
}

fn na(reason: impl Into<String>) -> Verdict {
    Verdict::NotApplicable { reason: reason.into() }
}

/// Exact singular gap of a single matrix through `‖g‖²/‖g∧g‖`.
fn gap(g: &Matrix) -> f64 {
    if g.dim() < 2 {
        return f64::INFINITY;
    }
    sqz_of_product(std::slice::from_ref(g))
}

fn product(factors: &[Matrix]) -> Matrix {
    Matrix::product(factors[0].dim(), factors)
}

fn top_u(g: &Matrix) -> ProjPoint {
    cones(g, 1.0).top_u()
}

fn check_product(c: &[Matrix], eps: f64) -> Verdict {
    if c.len() != 2 {
        return na("expects [g, h]");
    }
    let (g, h) = (&c[0], &c[1]);
    if !is_aligned(g, h, eps) {
        return na("g is not eps-aligned with h");
    }
    let le = eps.ln().abs();
    let mut out = Conclusions::new();
    out.ge("gap of product", sqz_of_product(c), gap(g) + gap(h) - 2.0 * le);
    let gh = g.mul(h);
    if !gh.is_zero() {
        let bound = (-gap(g)).exp() / eps;
        out.le("image direction", proj_dist(&top_u(g), &top_u(&gh)), bound);
    }
    out.verdict()
}

fn check_triple(c: &[Matrix], eps: f64) -> Verdict {
    if c.len() != 3 {
        return na("expects [f, g, h]");
    }
    let le = eps.ln().abs();
    let sg = gap(&c[1]);
    if sg < 2.0 * le + 2.0 * 2f64.ln() {
        return na("middle factor gap too small");
    }
    if !is_aligned(&c[0], &c[1], eps) || !is_aligned(&c[1], &c[2], eps) {
        return na("triple is not aligned");
    }
    let mut out = Conclusions::new();
    out.ge("gap of triple product", sqz_of_product(c), sg - 4.0 * le - 2.0 * 2f64.ln());
    out.verdict()
}

fn check_heredity(c: &[Matrix], eps: f64) -> Verdict {
    if c.len() != 3 {
        return na("expects [f, g, h]");
    }
    let le = eps.ln().abs();
    if gap(&c[1]) < 2.0 * le + 3.0 * 2f64.ln() {
        return na("middle factor gap too small");
    }
    if !is_aligned(&c[0], &c[1], eps) || !is_aligned(&c[1], &c[2], eps / 2.0) {
        return na("alignment hypotheses fail");
    }
    let mut out = Conclusions::new();
    out.aligned("f aligned with gh", &c[0], &c[1].mul(&c[2]), eps / 2.0);
    out.verdict()
}

fn check_chain(c: &[Matrix], eps: f64) -> Verdict {
    if c.is_empty() {
        return na("empty chain");
    }
    let n = c.len() - 1;
    let le = eps.ln().abs();
    let l2 = 2f64.ln();
    for k in 0..n {
        if gap(&c[k]) < 2.0 * le + 3.0 * l2 {
            return na(format!("factor {k} gap too small"));
        }
        if !is_aligned(&c[k], &c[k + 1], eps) {
            return na(format!("factor {k} not aligned with its successor"));
        }
    }
    let p = product(c);
    let mut out = Conclusions::new();
    let norms: f64 = c.iter().map(op_norm).sum();
    out.ge("norm of chain", op_norm(&p), n as f64 * (eps / 2.0).ln() + norms);
    let gaps: f64 = c.iter().map(gap).sum();
    let lhs = if c[0].dim() < 2 { f64::INFINITY } else { sqz_of_product(c) };
    out.ge("gap of chain", lhs, gaps - 2.0 * n as f64 * (le + l2));
    if !p.is_zero() {
        let bound = 2.0 / eps * (-gap(&c[0])).exp();
        out.le("image direction", proj_dist(&top_u(&c[0]), &top_u(&p)), bound);
    }
    out.verdict()
}

fn check_partial(c: &[Matrix], eps: f64) -> Verdict {
    if c.len() < 2 {
        return na("expects at least two factors");
    }
    let n = c.len() - 1;
    let le = eps.ln().abs();
    for (i, g) in c.iter().enumerate().take(n).skip(1) {
        if gap(g) < 2.0 * le + 4.0 * 2f64.ln() {
            return na(format!("factor {i} gap too small"));
        }
    }
    for k in 0..n {
        if !is_aligned(&c[k], &c[k + 1], eps) {
            return na(format!("factor {k} not aligned with its successor"));
        }
    }
    let mut out = Conclusions::new();
    for k in 1..=n {
        let pre = product(&c[..k]);
        let suf = product(&c[k..]);
        out.aligned(&format!("split at {k}"), &pre, &suf, eps / 2.0);
    }
    out.verdict()
}

fn check_left_aligned(c: &[Matrix], eps: f64) -> Verdict {
    if c.len() < 2 {
        return na("expects [h, g_0, ...]");
    }
    let (h, g) = (&c[0], &c[1..]);
    let le = eps.ln().abs();
    for (i, gi) in g.iter().enumerate() {
        if gap(gi) < 2.0 * le + 4.0 * 2f64.ln() {
            return na(format!("factor {i} gap too small"));
        }
    }
    if !is_aligned(h, &g[0], eps) {
        return na("h not aligned with g_0");
    }
    for i in 0..g.len() - 1 {
        if !is_aligned(&g[i], &g[i + 1], eps / 2.0) {
            return na(format!("factor {i} not aligned with its successor"));
        }
    }
    let mut out = Conclusions::new();
    out.aligned("h aligned with product", h, &product(g), eps / 2.0);
    out.verdict()
}

fn check_alternating(c: &[Matrix], eps: f64) -> Verdict {
    if c.len() < 4 || c.len() % 2 != 0 {
        return na("expects [γ_-1, γ_0, ..., γ_2n] with n >= 1");
    }
    let n = (c.len() - 2) / 2;
    let gamma = &c[1..];
    let le = eps.ln().abs();
    let threshold = 4.0 * le + 7.0 * 2f64.ln();
    if gap(&gamma[0]) < threshold {
        return na("factor 0 gap too small");
    }
    for i in (1..2 * n).step_by(2) {
        if gap(&gamma[i]) < threshold {
            return na(format!("factor {i} gap too small"));
        }
    }
    if !is_aligned(&c[0], &gamma[0], eps) {
        return na("γ_-1 not aligned with γ_0");
    }
    let mut prefix = gamma[0].clone();
    for i in 0..n {
        let (a, b) = (&gamma[2 * i + 1], &gamma[2 * i + 2]);
        if !is_aligned(&prefix, a, eps) || !is_aligned(a, b, eps) {
            return na(format!("alternating alignment fails at {i}"));
        }
        prefix = prefix.mul(a).mul(b);
    }
    let mut out = Conclusions::new();
    out.aligned("γ_-1 aligned with product", &c[0], &prefix, eps / 2.0);
    out.verdict()
}

/// Checks the eigenvalue consequences of self-alignment for a single matrix.
pub fn eigen_align_check(g: &Matrix, eps: f64) -> LemmaReport {
    LemmaReport { lemma: Lemma::EigenAlignment, verdict: eigen_verdict(g, eps) }
}

fn eigen_verdict(g: &Matrix, eps: f64) -> Verdict {
    if g.is_zero() || g.dim() < 2 {
        return na("needs a nonzero matrix with d >= 2");
    }
    let le = eps.ln().abs();
    let s = gap(g);
    if s < 2.0 * le + 4.0 * 2f64.ln() {
        return na("gap too small");
    }
    if !is_aligned(g, g, eps) {
        return na("g is not self-aligned");
    }
    let mut out = Conclusions::new();
    let (Ok(r1), Ok(p)) = (log_spectral_radius(g), prox(g)) else {
        return Verdict::Fail { margin: f64::NEG_INFINITY, conclusion: "eigen-solver".into() };
    };
    out.ge("spectral radius", r1, (eps / 2.0).ln() + op_norm(g));
    out.ge("spectral gap", p, s - 2.0 * le - 2.0 * 2f64.ln());
    match top_eigenline(g) {
        Ok(e) => out.le("eigenline", proj_dist(&top_u(g), &e), 2.0 / eps * (-s).exp()),
        Err(_) => out.record("eigenline", f64::NEG_INFINITY),
    }
    out.verdict()
}

/// Checks one lemma on `chain`, laid out as documented on [`Lemma`].
pub fn check_lemma(lemma: Lemma, chain: &[Matrix], eps: f64) -> LemmaReport {
    assert!(eps > 0.0 && eps <= 1.0, "eps must lie in (0, 1]");
    let verdict = if chain.iter().any(Matrix::is_zero) {
        na("lemmas concern non-zero matrices")
    } else {
        match lemma {
            Lemma::Product => check_product(chain, eps),
            Lemma::Triple => check_triple(chain, eps),
            Lemma::Heredity => check_heredity(chain, eps),
            Lemma::Chain => check_chain(chain, eps),
            Lemma::PartialProducts => check_partial(chain, eps),
            Lemma::LeftAlignedChain => check_left_aligned(chain, eps),
            Lemma::Alternating => check_alternating(chain, eps),
            Lemma::EigenAlignment if chain.len() == 1 => eigen_verdict(&chain[0], eps),
            Lemma::EigenAlignment => na("expects [g]"),
        }
    };
    LemmaReport { lemma, verdict }
}

/// Checks every lemma in `lemmas` against the same chain.
pub fn check_chain_lemmas(chain: &[Matrix], eps: f64, lemmas: &[Lemma]) -> Vec<LemmaReport> {
    lemmas.iter().map(|&l| check_lemma(l, chain, eps)).collect()
}

/// `O₁ diag(s) O₂` with Haar `O_i`, top gap `log(s_1/s_2) = gap`, lower
/// log singular values spread below `s_2`, and a random overall scale.
pub fn random_with_gap(d: usize, gap: f64, rng: &mut RngStream) -> Matrix {
    let mut s = vec![0.0; d];
    for i in 1..d {
        s[i] = if i == 1 { -gap } else { s[i - 1] - 3.0 * rng.random::<f64>() };
    }
    let diag = DMatrix::from_diagonal(&DVector::from_iterator(d, s.iter().map(|x| x.exp())));
    let e = haar_orthogonal(d, rng) * diag * haar_orthogonal(d, rng);
    Matrix::scaled(e, rng.random_range(-5.0..5.0))
}

/// Smallest factor gap each lemma asks of its squeezing factors.
fn required_gap(lemma: Lemma, eps: f64) -> f64 {
    let (le, l2) = (eps.ln().abs(), 2f64.ln());
    match lemma {
        Lemma::Product => 0.0,
        Lemma::Triple => 2.0 * le + 2.0 * l2,
        Lemma::Heredity | Lemma::Chain => 2.0 * le + 3.0 * l2,
        Lemma::PartialProducts | Lemma::LeftAlignedChain | Lemma::EigenAlignment => 2.0 * le + 4.0 * l2,
        Lemma::Alternating => 4.0 * le + 7.0 * l2,
    }
}

/// One candidate chain laid out for `lemma`, with `ε` log-uniform in
/// `[0.1, 0.5]`. Squeezing factors get the lemma's gap plus up to 4; free
/// factors get gaps in `[0, 8]`. All gaps stay below 18 so that wedge
/// minors keep about eight significant digits, well inside the slack.
/// Alignment hypotheses are not enforced here, see [`applicable_instance`].
pub fn random_instance(lemma: Lemma, d: usize, rng: &mut RngStream) -> (Vec<Matrix>, f64) {
    assert!(d >= 2);
    let eps = rng.random_range(0.1f64.ln()..0.5f64.ln()).exp();
    let need = required_gap(lemma, eps);
    let tight = |rng: &mut RngStream| random_with_gap(d, need + 4.0 * rng.random::<f64>(), rng);
    let free = |rng: &mut RngStream| random_with_gap(d, 8.0 * rng.random::<f64>(), rng);
    let chain = match lemma {
        Lemma::Product => vec![free(rng), free(rng)],
        Lemma::Triple | Lemma::Heredity => {
            let f = free(rng);
            let g = tight(rng);
            vec![f, g, free(rng)]
        }
        Lemma::Chain | Lemma::PartialProducts => {
            let n = rng.random_range(2..=6);
            (0..n).map(|_| tight(rng)).collect()
        }
        Lemma::LeftAlignedChain => {
            let n = rng.random_range(1..=4);
            let mut c = vec![free(rng)];
            c.extend((0..n).map(|_| tight(rng)));
            c
        }
        Lemma::Alternating => {
            let n = rng.random_range(1..=3);
            let mut c = vec![free(rng), tight(rng)];
            for _ in 0..n {
                c.push(tight(rng));
                c.push(free(rng));
            }
            c
        }
        Lemma::EigenAlignment => vec![tight(rng)],
    };
    (chain, eps)
}

/// Draws candidates until one satisfies the lemma's hypotheses; `None`
/// after `max_tries` rejections.
pub fn applicable_instance(
    lemma: Lemma,
    d: usize,
    max_tries: usize,
    rng: &mut RngStream,
) -> Option<(Vec<Matrix>, f64, LemmaReport)> {
    for _ in 0..max_tries {
        let (chain, eps) = random_instance(lemma, d, rng);
        let report = check_lemma(lemma, &chain, eps);
        if !matches!(report.verdict, Verdict::NotApplicable { .. }) {
            return Some((chain, eps, report));
        }
    }
    None
}

/// Outcome of [`lemma_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub lemma: Lemma,
    /// Instances meeting the hypotheses.
    pub applicable: usize,
    /// Candidates drawn in total, rejected ones included.
    pub candidates: usize,
    pub violations: usize,
    pub worst_margin: f64,
}

/// Checks `instances` random instances of `lemma` that satisfy its
/// hypotheses. Instance `i` uses `rng.derive(i)`, dimension `dim` or
/// `2 + i mod 3` when unset, and at most `max_tries` candidates.
pub fn lemma_suite(
    lemma: Lemma,
    instances: usize,
    dim: Option<usize>,
    max_tries: usize,
    rng: &RngStream,
) -> SuiteReport {
    let out: Vec<(usize, Option<f64>, bool)> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i);
            let d = dim.unwrap_or(2 + (i % 3) as usize);
            for tries in 1..=max_tries {
                let (chain, eps) = random_instance(lemma, d, &mut r);
                match check_lemma(lemma, &chain, eps).verdict {
                    Verdict::NotApplicable { .. } => continue,
                    Verdict::Pass { margin } => return (tries, Some(margin), false),
                    Verdict::Fail { margin, .. } => return (tries, Some(margin), true),
                }
            }
            (max_tries, None, false)
        })
        .collect();
    let mut rep = SuiteReport { lemma, applicable: 0, candidates: 0, violations: 0, worst_margin: f64::INFINITY };
    for (tries, margin, failed) in out {
        rep.candidates += tries;
        if let Some(m) = margin {
            rep.applicable += 1;
            rep.worst_margin = rep.worst_margin.min(m);
        }
        rep.violations += failed as usize;
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot(t: f64) -> Matrix {
        Matrix::rotation(t)
    }

    #[test]
    fn alignment_examples() {
        let id = Matrix::identity(2);
        assert!(is_aligned(&id, &id, 1.0));
        assert!(is_aligned(&rot(0.3), &rot(1.1), 1.0));
    }

    #[test]
    fn zero_product_is_not_aligned() {
        let p = Matrix::diag(&[1.0, 0.0]);
        let q = Matrix::diag(&[0.0, 1.0]);
        assert_eq!(alignment_margin(&p, &q, 0.5), f64::NEG_INFINITY);
        assert!(!is_aligned(&p, &q, 1e-12));
    }

    #[test]
    fn witnesses_are_sharp() {
        let g = Matrix::diag(&[10.0, 1.0]).mul(&rot(0.4));
        let h = rot(0.2).mul(&Matrix::diag(&[10.0, 1.0]));
        let r = alignment_ratio(&g, &h).exp();
        let (_, _, c) = alignment_witnesses(&g, &h);
        assert!(c >= r - 1e-9);
    }

    #[test]
    fn product_lemma_on_constructed_pair() {
        let g = Matrix::diag(&[10.0, 1.0]).mul(&rot(0.5));
        let h = Matrix::diag(&[10.0, 1.0]).mul(&rot(-0.2));
        let r = check_lemma(Lemma::Product, &[g, h], 0.5);
        assert!(r.verdict.is_pass(), "{r:?}");
    }

    #[test]
    fn single_matrix_chain_passes() {
        let g = Matrix::diag(&[3.0, 1.0]);
        let r = check_lemma(Lemma::Chain, &[g], 0.5);
        assert!(r.verdict.is_pass(), "{r:?}");
    }

    #[test]
    fn eigen_examples() {
        let r = eigen_align_check(&Matrix::diag(&[100.0, 1.0]), 0.5);
        assert!(r.verdict.is_pass(), "{r:?}");
        let r = eigen_align_check(&Matrix::identity(2), 0.5);
        assert!(matches!(r.verdict, Verdict::NotApplicable { .. }));
    }

    #[test]
    fn lemma_names_round_trip() {
        for l in Lemma::ALL {
            assert_eq!(l.name().parse::<Lemma>().unwrap(), l);
        }
    }

    #[test]
    fn discrete_extremes() {
        let mut rng = RngStream::new(11, 0);
        let a = build_discrete(0.2, 0.6, 2, &mut rng).unwrap();
        assert!(a.measured_hole() <= 0.1);
        let id = Matrix::identity(2);
        assert!(a.related(&id, &id));
        let g = Matrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.01]));
        let h = Matrix::new(DMatrix::from_row_slice(2, 2, &[0.01, 0.0, 0.0, 1.0]));
        assert!(alignment_ratio(&g, &h).exp() < 0.2);
        assert!(!a.related(&g, &h));
    }
}
