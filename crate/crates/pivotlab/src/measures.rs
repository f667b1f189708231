//! Step distributions, seeded random streams, and the rank and kernel
//! diagnostics for products of random matrices.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::projgeo::{jacobi_svd, log_singular_values, spectral_norm, Matrix, LOG_CLIFF};
use crate::stats::wilson_interval;

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Independent sub-streams (one per trial, probe, …) are derived with
/// [`RngStream::derive`]: the child seed mixes the parent's seed and stream id
/// with SplitMix64 and the child stream id is the given counter.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// The `index`-th child stream; independent of how much `self` was used.
    pub fn derive(&self, index: u64) -> RngStream {
        RngStream::new(splitmix(self.seed ^ splitmix(self.stream)), index)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Haar-distributed orthogonal matrix (determinant ±1).
pub fn haar_orthogonal(d: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Haar-distributed rotation (determinant +1).
pub fn haar_rotation(d: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let mut q = haar_orthogonal(d, rng);
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Matrix with i.i.d. standard Gaussian entries.
pub fn gaussian_matrix(d: usize, rng: &mut RngStream) -> Matrix {
    Matrix::new(DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
}

/// Vector with i.i.d. standard Gaussian entries.
pub fn gaussian_vector(d: usize, rng: &mut RngStream) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Named parametric step distributions.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    /// `K · diag(diag)` with `K` Haar on `SO(d)`.
    RotDiag { diag: Vec<f64> },
    /// `diag(e^T, 1, …, 1) · K` with `K` Haar on `O(d)` and `T` drawn from a
    /// finite law on `t_values`.
    StretchHaar { t_values: Vec<f64>, t_weights: Vec<f64> },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::RotDiag { .. } => "rot_diag",
            Generator::StretchHaar { .. } => "stretch_haar",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("weights sum to {0}, expected 1 within 1e-12")]
    Weights(f64),
    #[error("invalid specification: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
enum Kind {
    Finite { atoms: Vec<Matrix>, weights: Vec<f64>, index: WeightedIndex<f64> },
    Parametric { generator: Generator, t_index: Option<WeightedIndex<f64>> },
}

/// A sampleable distribution `ν` on `d × d` matrices.
#[derive(Clone, Debug)]
pub struct MeasureSpec {
    dim: usize,
    kind: Kind,
}

fn check_weights(weights: &[f64]) -> Result<WeightedIndex<f64>, MeasureError> {
    if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(MeasureError::Invalid("weights must be positive and finite".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(MeasureError::Weights(sum));
    }
    WeightedIndex::new(weights.iter().copied()).map_err(|e| MeasureError::Invalid(e.to_string()))
}

impl MeasureSpec {
    /// Finite support with the given weights (must sum to 1).
    pub fn finite(atoms: Vec<(Matrix, f64)>) -> Result<Self, MeasureError> {
        if atoms.is_empty() {
            return Err(MeasureError::Invalid("no atoms".into()));
        }
        let dim = atoms[0].0.dim();
        if atoms.iter().any(|(g, _)| g.dim() != dim) {
            return Err(MeasureError::Invalid("atoms of different dimensions".into()));
        }
        let (atoms, weights): (Vec<_>, Vec<_>) = atoms.into_iter().unzip();
        let index = check_weights(&weights)?;
        Ok(MeasureSpec { dim, kind: Kind::Finite { atoms, weights, index } })
    }

    /// The point mass at `g`.
    pub fn dirac(g: Matrix) -> Self {
        Self::finite(vec![(g, 1.0)]).expect("a single unit weight is valid")
    }

    /// Uniform distribution on the given atoms.
    pub fn uniform(atoms: Vec<Matrix>) -> Result<Self, MeasureError> {
        let w = 1.0 / atoms.len() as f64;
        Self::finite(atoms.into_iter().map(|g| (g, w)).collect())
    }

    pub fn parametric(dim: usize, generator: Generator) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::Invalid("dimension must be positive".into()));
        }
        let t_index = match &generator {
            Generator::RotDiag { diag } => {
                if diag.len() != dim || diag.iter().any(|x| !x.is_finite()) {
                    return Err(MeasureError::Invalid("diag must have d finite entries".into()));
                }
                None
            }
            Generator::StretchHaar { t_values, t_weights } => {
                if t_values.len() != t_weights.len()
                    || t_values.iter().any(|t| !(t.is_finite() && *t >= 0.0))
                {
                    return Err(MeasureError::Invalid(
                        "t_values must be non-negative and match t_weights".into(),
                    ));
                }
                Some(check_weights(t_weights)?)
            }
        };
        Ok(MeasureSpec { dim, kind: Kind::Parametric { generator, t_index } })
    }

    /// One of the specifications shipped with the library.
    pub fn bundled(name: &str) -> Option<Self> {
        let text = match name {
            "sl2_hyperbolic" => include_str!("../specs/sl2_hyperbolic.txt"),
            "noninv_proj" => include_str!("../specs/noninv_proj.txt"),
            "rot_diag_d3" => include_str!("../specs/rot_diag_d3.txt"),
            "fan8" => include_str!("../specs/fan8.txt"),
            _ => return None,
        };
        Some(Self::parse(text).expect("bundled specs are valid"))
    }

    pub const BUNDLED: [&'static str; 4] = ["sl2_hyperbolic", "noninv_proj", "rot_diag_d3", "fan8"];

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.kind, Kind::Finite { .. })
    }

    /// The atoms of a finite-support spec.
    pub fn atoms(&self) -> Option<&[Matrix]> {
        match &self.kind {
            Kind::Finite { atoms, .. } => Some(atoms),
            Kind::Parametric { .. } => None,
        }
    }

    /// The weights of a finite-support spec.
    pub fn weights(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Finite { weights, .. } => Some(weights),
            Kind::Parametric { .. } => None,
        }
    }

    pub fn generator(&self) -> Option<&Generator> {
        match &self.kind {
            Kind::Parametric { generator, .. } => Some(generator),
            Kind::Finite { .. } => None,
        }
    }

    /// Draws an atom index (finite specs only).
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.kind {
            Kind::Finite { index, .. } => index.sample(rng),
            Kind::Parametric { .. } => panic!("sample_index needs a finite spec"),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Matrix {
        match &self.kind {
            Kind::Finite { atoms, index, .. } => atoms[index.sample(rng)].clone(),
            Kind::Parametric { generator, t_index } => match generator {
                Generator::RotDiag { diag } => {
                    let k = haar_rotation(self.dim, rng);
                    let d = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
                    Matrix::new(k * d)
                }
                Generator::StretchHaar { t_values, .. } => {
                    let t = t_values[t_index.as_ref().expect("weights").sample(rng)];
                    let mut k = haar_orthogonal(self.dim, rng);
                    // diag(e^T, 1, …) · K, kept in log-scale: scale the other rows down.
                    let shrink = (-t).exp();
                    for i in 1..self.dim {
                        k.row_mut(i).scale_mut(shrink);
                    }
                    Matrix::scaled(k, t)
                }
            },
        }
    }

    /// Parses the structured text format (see [`MeasureSpec::to_text`]).
    pub fn parse(text: &str) -> Result<Self, MeasureError> {
        let err = |line: usize, msg: &str| MeasureError::Parse { line, msg: msg.to_string() };
        let mut dim: Option<usize> = None;
        let mut atoms: Vec<(f64, Option<f64>, Vec<f64>)> = Vec::new();
        let mut generator: Option<String> = None;
        let mut params: Vec<(String, Vec<f64>)> = Vec::new();
        let nums = |line: usize, toks: &[&str]| -> Result<Vec<f64>, MeasureError> {
            toks.iter()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| err(line, &format!("bad number '{t}'")))
                })
                .collect()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            match toks[0] {
                "dim" => {
                    let d = toks
                        .get(1)
                        .and_then(|t| t.parse::<usize>().ok())
                        .filter(|&d| d >= 1)
                        .ok_or_else(|| err(line, "dim expects a positive integer"))?;
                    dim = Some(d);
                }
                "atom" => {
                    let v = nums(line, &toks[1..])?;
                    match v.len() {
                        1 => atoms.push((v[0], None, Vec::new())),
                        2 => atoms.push((v[0], Some(v[1]), Vec::new())),
                        _ => return Err(err(line, "atom expects <weight> [<log_scale>]")),
                    }
                }
                "row" => {
                    let v = nums(line, &toks[1..])?;
                    let d = dim.ok_or_else(|| err(line, "row before dim"))?;
                    if v.len() != d {
                        return Err(err(line, "row length differs from dim"));
                    }
                    let atom = atoms.last_mut().ok_or_else(|| err(line, "row before atom"))?;
                    if atom.2.len() >= d * d {
                        return Err(err(line, "too many rows"));
                    }
                    atom.2.extend(v);
                }
                "generator" => {
                    let name = toks.get(1).ok_or_else(|| err(line, "generator expects a name"))?;
                    generator = Some(name.to_string());
                }
                "param" => {
                    let name = toks.get(1).ok_or_else(|| err(line, "param expects a name"))?;
                    params.push((name.to_string(), nums(line, &toks[2..])?));
                }
                other => return Err(err(line, &format!("unknown keyword '{other}'"))),
            }
        }
        let d = dim.ok_or_else(|| err(0, "missing dim"))?;
        match (generator, atoms.is_empty()) {
            (Some(_), false) => Err(err(0, "both atoms and generator given")),
            (None, true) => Err(err(0, "no atoms and no generator")),
            (None, false) => {
                let mut out = Vec::with_capacity(atoms.len());
                for (w, ls, rows) in atoms {
                    if rows.len() != d * d {
                        return Err(err(0, "atom with missing rows"));
                    }
                    let m = DMatrix::from_row_slice(d, d, &rows);
                    let g = match ls {
                        Some(ls) => Matrix::from_parts(m, ls),
                        None => Matrix::new(m),
                    };
                    out.push((g, w));
                }
                Self::finite(out)
            }
            (Some(name), true) => {
                let get = |k: &str| {
                    params
                        .iter()
                        .find(|(n, _)| n == k)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| err(0, &format!("missing param {k}")))
                };
                let generator = match name.as_str() {
                    "rot_diag" => Generator::RotDiag { diag: get("diag")? },
                    "stretch_haar" => Generator::StretchHaar {
                        t_values: get("t_values")?,
                        t_weights: get("t_weights")?,
                    },
                    other => return Err(err(0, &format!("unknown generator '{other}'"))),
                };
                Self::parametric(d, generator)
            }
        }
    }

    /// Serializes to the structured text format; numbers use the shortest
    /// representation that reads back to the same double.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "dim {}", self.dim).unwrap();
        match &self.kind {
            Kind::Finite { atoms, weights, .. } => {
                for (g, w) in atoms.iter().zip(weights) {
                    writeln!(s, "atom {} {}", w, g.log_scale()).unwrap();
                    for r in 0..self.dim {
                        let row: Vec<String> =
                            (0..self.dim).map(|c| g.entries()[(r, c)].to_string()).collect();
                        writeln!(s, "row {}", row.join(" ")).unwrap();
                    }
                }
            }
            Kind::Parametric { generator, .. } => {
                writeln!(s, "generator {}", generator.name()).unwrap();
                let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
                match generator {
                    Generator::RotDiag { diag } => writeln!(s, "param diag {}", join(diag)).unwrap(),
                    Generator::StretchHaar { t_values, t_weights } => {
                        writeln!(s, "param t_values {}", join(t_values)).unwrap();
                        writeln!(s, "param t_weights {}", join(t_weights)).unwrap();
                    }
                }
            }
        }
        s
    }
}

/// `n` i.i.d. draws from `nu`.
pub fn sample_word(nu: &MeasureSpec, n: usize, rng: &mut RngStream) -> Vec<Matrix> {
    (0..n).map(|_| nu.sample(rng)).collect()
}

/// Numerical rank: singular values above the cliff.
pub fn rank(g: &Matrix) -> usize {
    log_singular_values(g).iter().filter(|l| l.is_finite()).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    /// Most frequent rank of the product at the horizon.
    pub modal_rank: usize,
    /// Per trial: rank at the horizon.
    pub final_ranks: Vec<usize>,
    /// Per trial: first `n` from which the rank stays constant up to the horizon.
    pub stabilization: Vec<usize>,
    /// Trials whose rank only settled in the second half of the horizon.
    pub flagged: usize,
}

/// Applies `g` to the subspace spanned by the orthonormal columns of `basis`
/// and returns an orthonormal basis of the image. Directions squeezed below
/// the cliff relative to `‖g‖` are dropped, so the threshold never compounds
/// along a product.
fn push_subspace(g: &Matrix, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let d = g.dim();
    if g.is_zero() || basis.ncols() == 0 {
        return DMatrix::zeros(d, 0);
    }
    let b = g.entries() * basis;
    let floor = spectral_norm(g.entries()) * (-LOG_CLIFF).exp();
    let svd = jacobi_svd(&b);
    let keep = svd.values.iter().take_while(|&&s| s > floor).count();
    svd.u.columns(0, keep).into_owned()
}

/// Eventual rank of `γ̄_n = γ_1 ⋯ γ_n` and the stabilization times.
///
/// `γ_1 ⋯ γ_n` and `γ_n ⋯ γ_1` have the same law for every `n`; each trial
/// follows the image `γ_n ⋯ γ_1 E` one letter at a time, which keeps the
/// numerical rank decision local to each step.
pub fn eventual_rank(
    nu: &MeasureSpec,
    trials: usize,
    horizon: usize,
    rng: &RngStream,
) -> RankReport {
    assert!(trials >= 1 && horizon >= 1);
    let d = nu.dim();
    let per_trial: Vec<(usize, usize)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut image = DMatrix::identity(d, d);
            let mut ranks = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                image = push_subspace(&nu.sample(&mut r), &image);
                ranks.push(image.ncols());
            }
            let last = *ranks.last().expect("horizon >= 1");
            let settle = ranks.iter().rposition(|&k| k != last).map_or(1, |i| i + 2);
            (last, settle)
        })
        .collect();
    let mut counts = vec![0usize; d + 1];
    for &(r, _) in &per_trial {
        counts[r] += 1;
    }
    let modal_rank = (0..=d).rev().max_by_key(|&k| counts[k]).expect("d >= 1");
    let flagged = per_trial.iter().filter(|&&(_, n)| 2 * n > horizon).count();
    RankReport {
        modal_rank,
        final_ranks: per_trial.iter().map(|p| p.0).collect(),
        stabilization: per_trial.iter().map(|p| p.1).collect(),
        flagged,
    }
}

/// Monte Carlo estimate of `P(γ̄_n v = 0)` with a 95% Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEstimate {
    pub n: usize,
    pub hits: usize,
    pub trials: usize,
    pub p_hat: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `P(γ̄_n v = 0)` for `n = 1..=n_max`.
///
/// `γ_1 ⋯ γ_n` and `γ_n ⋯ γ_1` have the same law, so each trial applies the
/// letters to `v` one at a time; once the vector is killed it stays killed,
/// which makes the estimated curve monotone trial by trial.
pub fn kernel_curve(
    nu: &MeasureSpec,
    v: &DVector<f64>,
    n_max: usize,
    trials: usize,
    rng: &RngStream,
) -> Vec<KernelEstimate> {
    assert!(v.norm() > 0.0, "v must be nonzero");
    assert_eq!(v.len(), nu.dim());
    let first_zero: Vec<Option<usize>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let mut w = v / v.norm();
            for n in 1..=n_max {
                let g = nu.sample(&mut r);
                let gw = g.apply(&w);
                let floor = spectral_norm(g.entries()) * (-LOG_CLIFF).exp();
                if g.is_zero() || gw.norm() <= floor {
                    return Some(n);
                }
                w = &gw / gw.norm();
            }
            None
        })
        .collect();
    (1..=n_max)
        .map(|n| {
            let hits = first_zero.iter().filter(|z| z.is_some_and(|k| k <= n)).count();
            let (lo, hi) = wilson_interval(hits, trials, 1.96);
            KernelEstimate { n, hits, trials, p_hat: hits as f64 / trials as f64, lo, hi }
        })
        .collect()
}

/// `P(γ̄_n v = 0)` at a single `n`.
pub fn kernel_probe(
    nu: &MeasureSpec,
    v: &DVector<f64>,
    n: usize,
    trials: usize,
    rng: &RngStream,
) -> KernelEstimate {
    *kernel_curve(nu, v, n, trials, rng).last().expect("n >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = RngStream::new(5, 3);
        let mut b = RngStream::new(5, 3);
        let mut c = RngStream::new(5, 4);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        let mut used = RngStream::new(5, 3);
        used.next_u64();
        assert_eq!(used.derive(2).next_u64(), RngStream::new(5, 3).derive(2).next_u64());
    }

    #[test]
    fn empty_and_single_atom_words() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[2.0, 1.0]));
        let mut r = RngStream::new(1, 0);
        assert!(sample_word(&nu, 0, &mut r).is_empty());
        let w = sample_word(&nu, 5, &mut r);
        assert!(w.iter().all(|g| g == &nu.atoms().unwrap()[0]));
    }

    #[test]
    fn two_atom_frequencies() {
        let nu = MeasureSpec::uniform(vec![Matrix::identity(2), Matrix::diag(&[2.0, 1.0])]).unwrap();
        let mut r = RngStream::new(2, 0);
        let hits = (0..100_000).filter(|_| nu.sample_index(&mut r) == 0).count();
        let f = hits as f64 / 1e5;
        assert!((0.49..=0.51).contains(&f), "{f}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let e = MeasureSpec::finite(vec![(Matrix::identity(2), 0.6), (Matrix::identity(2), 0.3)]);
        assert!(matches!(e, Err(MeasureError::Weights(_))));
    }

    #[test]
    fn text_round_trip_is_exact() {
        for name in MeasureSpec::BUNDLED {
            let nu = MeasureSpec::bundled(name).unwrap();
            let text = nu.to_text();
            let back = MeasureSpec::parse(&text).unwrap();
            assert_eq!(back.to_text(), text, "{name}");
            if let (Some(a), Some(b)) = (nu.atoms(), back.atoms()) {
                assert_eq!(a, b);
                assert_eq!(nu.weights(), back.weights());
            }
            assert_eq!(nu.generator(), back.generator());
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = MeasureSpec::parse("dim 2\natom 1\nrow 1 2 3\n").unwrap_err();
        assert!(matches!(e, MeasureError::Parse { line: 3, .. }), "{e:?}");
        assert!(MeasureSpec::parse("dim 2\nfoo\n").is_err());
    }

    #[test]
    fn haar_rotations_are_orthogonal() {
        let mut r = RngStream::new(3, 0);
        for d in 1..=5 {
            let q = haar_rotation(d, &mut r);
            assert!((q.transpose() * &q - DMatrix::identity(d, d)).norm() < 1e-12);
            assert!((q.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invertible_dirac_has_full_rank_at_once() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[2.0, 1.0, 0.5]));
        let rep = eventual_rank(&nu, 20, 30, &RngStream::new(4, 0));
        assert_eq!(rep.modal_rank, 3);
        assert!(rep.stabilization.iter().all(|&n| n == 1));
        assert_eq!(rep.flagged, 0);
    }

    #[test]
    fn projection_dirac_has_rank_one() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[1.0, 0.0]));
        let rep = eventual_rank(&nu, 10, 10, &RngStream::new(5, 0));
        assert_eq!(rep.modal_rank, 1);
        assert!(rep.stabilization.iter().all(|&n| n == 1));
    }

    #[test]
    fn ranks_never_increase_along_a_product() {
        let nu = MeasureSpec::bundled("noninv_proj").unwrap();
        let mut r = RngStream::new(6, 0);
        let mut prod = Matrix::identity(2);
        let mut last = 2;
        for _ in 0..200 {
            prod = prod.mul(&nu.sample(&mut r));
            let k = rank(&prod);
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn kernel_of_invertible_spec_is_trivial() {
        let nu = MeasureSpec::bundled("sl2_hyperbolic").unwrap();
        let v = DVector::from_vec(vec![0.3, -1.0]);
        let est = kernel_probe(&nu, &v, 20, 1000, &RngStream::new(7, 0));
        assert_eq!(est.hits, 0);
    }

    #[test]
    fn projection_kills_its_kernel() {
        let nu = MeasureSpec::dirac(Matrix::diag(&[1.0, 0.0]));
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let est = kernel_probe(&nu, &v, 1, 100, &RngStream::new(8, 0));
        assert_eq!(est.p_hat, 1.0);
    }
}
