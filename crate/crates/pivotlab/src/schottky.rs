//! Construction and validation of ρ-Schottky word measures.
//!
//! A [`SchottkySystem`] is a finitely supported law `ν̃_s` on words of `m`
//! letters of a finite step distribution `ν`, with `α ν̃_s ≤ ν^{⊗m}` atom by
//! atom, whose products all squeeze strongly and are aligned on either side
//! with any fixed matrix with probability at least `1 − ρ`.
//!
//! The boundary points used by the existence proof are replaced by the top
//! singular directions of long products: each support word's product lies
//! within `ε` (in operator norm, up to sign) of a rank-one center `u wᵀ`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::is_aligned;
use crate::measures::{gaussian_matrix, gaussian_vector, MeasureSpec, RngStream};
use crate::projgeo::{
    cones, op_norm, singular_data, spectral_norm, vec_dist, ExteriorProduct, Matrix, ProjPoint,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchottkyError {
    #[error("a finite-support step distribution is required")]
    NotFinite,
    #[error("rho must lie in (0, 1/5], got {0}")]
    BadRho(f64),
    #[error("dimension must be at least 2")]
    Dimension,
    #[error("products never squeeze (max gap {max_sqz:.3}); the distribution looks non-proximal")]
    NotProximal { max_sqz: f64 },
    #[error("only {found} distinct directions found, {needed} needed; try longer products")]
    TooFewDirections { found: usize, needed: usize },
    #[error("search exhausted: best worst-case kill mass {best_kill:.4} (m={best_m}, eps=2^-{best_k}), target rho {rho}")]
    Exhausted { best_kill: f64, best_m: usize, best_k: u32, rho: f64 },
    #[error("invalid system: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One support word of `ν̃_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchottkyWord {
    /// Atom indices into the step distribution, first letter first.
    pub letters: Vec<usize>,
    /// Mass under `ν̃_s`.
    pub weight: f64,
    /// Mass of the same word under `ν^{⊗m}`.
    pub base_mass: f64,
    pub product: Matrix,
    /// Exact singular gap of the product.
    pub sqz: f64,
}

#[derive(Clone, Debug)]
pub struct SchottkySystem {
    m: usize,
    eps: f64,
    rho: f64,
    alpha: f64,
    k_param: f64,
    atoms: Vec<Matrix>,
    atom_weights: Vec<f64>,
    words: Vec<SchottkyWord>,
    centers: Vec<(DVector<f64>, DVector<f64>)>,
    index: HashMap<Vec<usize>, usize>,
    sampler: WeightedIndex<f64>,
    letter_sampler: WeightedIndex<f64>,
}

fn invalid(msg: impl Into<String>) -> SchottkyError {
    SchottkyError::Invalid(msg.into())
}

fn word_product(atoms: &[Matrix], letters: &[usize]) -> (Matrix, f64) {
    let d = atoms[0].dim();
    let mut acc = ExteriorProduct::new(d, 2.min(d));
    for &l in letters {
        acc.push(&atoms[l]);
    }
    let sqz = if d >= 2 { acc.sqz(1) } else { f64::INFINITY };
    (acc.product().clone(), sqz)
}

impl SchottkySystem {
    /// Builds a system from an explicit weighted word list over the atoms of
    /// `nu`. When `alpha` is `None` the largest constant with
    /// `α ν̃_s ≤ ν^{⊗m}` is used; otherwise the given one is checked.
    pub fn from_words(
        nu: &MeasureSpec,
        m: usize,
        eps: f64,
        rho: f64,
        k_param: f64,
        words: Vec<(Vec<usize>, f64)>,
        alpha: Option<f64>,
    ) -> Result<Self, SchottkyError> {
        let atoms = nu.atoms().ok_or(SchottkyError::NotFinite)?.to_vec();
        let atom_weights = nu.weights().expect("finite spec").to_vec();
        Self::assemble(atoms, atom_weights, m, eps, rho, k_param, words, alpha, Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        atoms: Vec<Matrix>,
        atom_weights: Vec<f64>,
        m: usize,
        eps: f64,
        rho: f64,
        k_param: f64,
        words: Vec<(Vec<usize>, f64)>,
        alpha: Option<f64>,
        centers: Vec<(DVector<f64>, DVector<f64>)>,
    ) -> Result<Self, SchottkyError> {
        if m == 0 {
            return Err(invalid("m must be positive"));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(invalid("eps must lie in (0, 1]"));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(invalid("rho must lie in (0, 1)"));
        }
        if words.is_empty() {
            return Err(invalid("no words"));
        }
        let total: f64 = words.iter().map(|w| w.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("word weights sum to {total}")));
        }
        let mut out = Vec::with_capacity(words.len());
        let mut index = HashMap::with_capacity(words.len());
        for (letters, weight) in words {
            if letters.len() != m || letters.iter().any(|&l| l >= atoms.len()) {
                return Err(invalid("word of wrong length or unknown letter"));
            }
            if !(weight > 0.0) {
                return Err(invalid("word weights must be positive"));
            }
            if index.insert(letters.clone(), out.len()).is_some() {
                return Err(invalid("repeated word"));
            }
            let base_mass = letters.iter().map(|&l| atom_weights[l]).product();
            let (product, sqz) = word_product(&atoms, &letters);
            out.push(SchottkyWord { letters, weight, base_mass, product, sqz });
        }
        let alpha = match alpha {
            Some(a) => {
                if !(a > 0.0 && a <= 1.0) || out.iter().any(|w| a * w.weight > w.base_mass) {
                    return Err(invalid(format!("minorization fails at alpha={a}")));
                }
                a
            }
            None => {
                let mut a = out.iter().map(|w| w.base_mass / w.weight).fold(1.0, f64::min);
                while out.iter().any(|w| a * w.weight > w.base_mass) {
                    a = a.next_down();
                }
                a
            }
        };
        let sampler = WeightedIndex::new(out.iter().map(|w| w.weight))
            .map_err(|e| invalid(e.to_string()))?;
        let letter_sampler =
            WeightedIndex::new(&atom_weights).map_err(|e| invalid(e.to_string()))?;
        Ok(SchottkySystem {
            m,
            eps,
            rho,
            alpha,
            k_param,
            atoms,
            atom_weights,
            words: out,
            centers,
            index,
            sampler,
            letter_sampler,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k_param(&self) -> f64 {
        self.k_param
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    /// Required singular gap of every support product: `K(|log ε| + log 2)`.
    pub fn threshold(&self) -> f64 {
        self.k_param * (self.eps.ln().abs() + 2f64.ln())
    }

    pub fn atoms(&self) -> &[Matrix] {
        &self.atoms
    }

    pub fn atom_weights(&self) -> &[f64] {
        &self.atom_weights
    }

    pub fn words(&self) -> &[SchottkyWord] {
        &self.words
    }

    /// Rank-one centers `(u, w)` of the neighbourhoods `S_k`.
    pub fn centers(&self) -> &[(DVector<f64>, DVector<f64>)] {
        &self.centers
    }

    /// Index of a word in the support, if present.
    pub fn find(&self, letters: &[usize]) -> Option<usize> {
        self.index.get(letters).copied()
    }

    /// `ν̃_s` mass of a word (0 outside the support).
    pub fn weight_of(&self, letters: &[usize]) -> f64 {
        self.find(letters).map_or(0.0, |i| self.words[i].weight)
    }

    /// `ν^{⊗m}` mass of a word.
    pub fn base_mass(&self, letters: &[usize]) -> f64 {
        letters.iter().map(|&l| self.atom_weights[l]).product()
    }

    /// Draws a support word index from `ν̃_s`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Draws a letter index from `ν`.
    pub fn sample_letter<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.letter_sampler.sample(rng)
    }

    /// Same system with a smaller minorization constant.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, SchottkyError> {
        if !(alpha > 0.0 && alpha <= self.alpha) {
            return Err(invalid(format!("alpha must lie in (0, {}]", self.alpha)));
        }
        let mut s = self.clone();
        s.alpha = alpha;
        Ok(s)
    }

    /// `α · ν̃_s(word) ≤ ν^{⊗m}(word)` for every support word, exactly.
    pub fn minorization_holds(&self) -> bool {
        self.words.iter().all(|w| self.alpha * w.weight <= w.base_mass)
    }

    /// Smallest exact singular gap over the support products.
    pub fn min_sqz(&self) -> f64 {
        self.words.iter().map(|w| w.sqz).fold(f64::INFINITY, f64::min)
    }

    /// `ν_s{γ : h A^ε γ}` and `ν_s{γ : γ A^ε h}`.
    pub fn masses(&self, h: &Matrix) -> (f64, f64) {
        let mut left = 0.0;
        let mut right = 0.0;
        for w in &self.words {
            if is_aligned(h, &w.product, self.eps) {
                left += w.weight;
            }
            if is_aligned(&w.product, h, self.eps) {
                right += w.weight;
            }
        }
        (left, right)
    }

    /// Structured text form; numbers use shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = self.dim();
        writeln!(s, "schottky").unwrap();
        writeln!(s, "dim {d}").unwrap();
        writeln!(s, "m {}", self.m).unwrap();
        writeln!(s, "eps {}", self.eps).unwrap();
        writeln!(s, "rho {}", self.rho).unwrap();
        writeln!(s, "alpha {}", self.alpha).unwrap();
        writeln!(s, "k_param {}", self.k_param).unwrap();
        for (g, w) in self.atoms.iter().zip(&self.atom_weights) {
            writeln!(s, "atom {} {}", w, g.log_scale()).unwrap();
            for r in 0..d {
                let row: Vec<String> = (0..d).map(|c| g.entries()[(r, c)].to_string()).collect();
                writeln!(s, "row {}", row.join(" ")).unwrap();
            }
        }
        for w in &self.words {
            let letters: Vec<String> = w.letters.iter().map(usize::to_string).collect();
            writeln!(s, "word {} {}", w.weight, letters.join(" ")).unwrap();
        }
        for (u, w) in &self.centers {
            let f = |v: &DVector<f64>| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
            writeln!(s, "center {} {}", f(u), f(w)).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SchottkyError> {
        let err = |line: usize, msg: &str| SchottkyError::Parse { line, msg: msg.to_string() };
        let mut dim = None;
        let (mut m, mut eps, mut rho, mut alpha, mut k_param) = (None, None, None, None, None);
        let mut atoms: Vec<(f64, f64, Vec<f64>)> = Vec::new();
        let mut words = Vec::new();
        let mut centers = Vec::new();
        let mut header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            let num = |t: &str| -> Result<f64, SchottkyError> {
                t.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| err(line, "bad number"))
            };
            let arg = |k: usize| toks.get(k).copied().ok_or_else(|| err(line, "missing value"));
            match toks[0] {
                "schottky" => header = true,
                "dim" => dim = Some(arg(1)?.parse::<usize>().map_err(|_| err(line, "bad dim"))?),
                "m" => m = Some(arg(1)?.parse::<usize>().map_err(|_| err(line, "bad m"))?),
                "eps" => eps = Some(num(arg(1)?)?),
                "rho" => rho = Some(num(arg(1)?)?),
                "alpha" => alpha = Some(num(arg(1)?)?),
                "k_param" => k_param = Some(num(arg(1)?)?),
                "atom" => atoms.push((num(arg(1)?)?, num(arg(2)?)?, Vec::new())),
                "row" => {
                    let a = atoms.last_mut().ok_or_else(|| err(line, "row before atom"))?;
                    for t in &toks[1..] {
                        a.2.push(num(t)?);
                    }
                }
                "word" => {
                    let w = num(arg(1)?)?;
                    let letters = toks[2..]
                        .iter()
                        .map(|t| t.parse::<usize>().map_err(|_| err(line, "bad letter")))
                        .collect::<Result<Vec<_>, _>>()?;
                    words.push((letters, w));
                }
                "center" => {
                    let d = dim.ok_or_else(|| err(line, "center before dim"))?;
                    let v = toks[1..].iter().map(|t| num(t)).collect::<Result<Vec<_>, _>>()?;
                    if v.len() != 2 * d {
                        return Err(err(line, "center needs 2d numbers"));
                    }
                    centers.push((
                        DVector::from_column_slice(&v[..d]),
                        DVector::from_column_slice(&v[d..]),
                    ));
                }
                other => return Err(err(line, &format!("unknown keyword '{other}'"))),
            }
        }
        if !header {
            return Err(err(0, "missing 'schottky' header"));
        }
        let d = dim.ok_or_else(|| err(0, "missing dim"))?;
        let missing = |k: &str| err(0, &format!("missing {k}"));
        let mut mats = Vec::new();
        let mut ws = Vec::new();
        for (w, ls, rows) in atoms {
            if rows.len() != d * d {
                return Err(err(0, "atom with wrong number of entries"));
            }
            mats.push(Matrix::from_parts(DMatrix::from_row_slice(d, d, &rows), ls));
            ws.push(w);
        }
        if mats.is_empty() {
            return Err(missing("atoms"));
        }
        Self::assemble(
            mats,
            ws,
            m.ok_or_else(|| missing("m"))?,
            eps.ok_or_else(|| missing("eps"))?,
            rho.ok_or_else(|| missing("rho"))?,
            k_param.ok_or_else(|| missing("k_param"))?,
            words,
            Some(alpha.ok_or_else(|| missing("alpha"))?),
            centers,
        )
    }
}

/// Greedy dedupe of directions: keeps a point when it is farther than
/// `radius` from every kept one. Input order decides priority.
fn dedupe(points: impl IntoIterator<Item = DVector<f64>>, radius: f64) -> Vec<DVector<f64>> {
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for p in points {
        if kept.iter().all(|q| vec_dist(&p, q) > radius) {
            kept.push(p);
        }
    }
    kept
}

/// Top singular pairs `(u, w)` of high-gap random products `γ̄_n`.
///
/// Products are sampled for each `n` in `n_range`; those with gap at least
/// `min_sqz` are kept, and their pairs are deduplicated so that any two
/// returned pairs differ by more than `eps` in `u` or in `w`.
pub fn find_candidates(
    nu: &MeasureSpec,
    n_range: RangeInclusive<usize>,
    samples: usize,
    eps: f64,
    min_sqz: f64,
    min_count: usize,
    rng: &RngStream,
) -> Result<Vec<(ProjPoint, ProjPoint)>, SchottkyError> {
    if nu.dim() < 2 {
        return Err(SchottkyError::Dimension);
    }
    let lens: Vec<usize> = n_range.collect();
    assert!(!lens.is_empty() && samples >= 1);
    let specimens: Vec<(f64, DVector<f64>, DVector<f64>)> = (0..samples as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let n = lens[t as usize % lens.len()];
            let mut acc = ExteriorProduct::new(nu.dim(), 2);
            for _ in 0..n {
                acc.push(&nu.sample(&mut r));
            }
            let c = cones(acc.product(), 1.0);
            (acc.sqz(1), c.top_u().vector().clone(), c.top_w().vector().clone())
        })
        .collect();
    let max_sqz = specimens.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    if !(max_sqz >= min_sqz) {
        return Err(SchottkyError::NotProximal { max_sqz });
    }
    let mut kept: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    for (s, u, w) in specimens {
        if s < min_sqz {
            continue;
        }
        if kept.iter().all(|(ku, kw)| vec_dist(&u, ku) > eps || vec_dist(&w, kw) > eps) {
            kept.push((u, w));
        }
    }
    if kept.len() < min_count {
        return Err(SchottkyError::TooFewDirections { found: kept.len(), needed: min_count });
    }
    Ok(kept
        .into_iter()
        .map(|(u, w)| (ProjPoint::new(u).expect("unit"), ProjPoint::new(w).expect("unit")))
        .collect())
}

/// Search budget and validation effort for [`build_schottky`].
#[derive(Clone, Debug, PartialEq)]
pub struct SchottkyParams {
    pub rho: f64,
    pub k_param: f64,
    pub m_max: usize,
    /// Largest `k` tried for `ε = 2^{-k}`.
    pub k_max: u32,
    /// Cap on the number of enumerated words `|supp ν|^m`.
    pub max_words: usize,
    /// Probes used to screen a configuration before full validation.
    pub screen_probes: usize,
    /// Probes used for the final validation.
    pub probes: usize,
}

impl Default for SchottkyParams {
    fn default() -> Self {
        SchottkyParams {
            rho: 0.2,
            k_param: 4.0,
            m_max: 16,
            k_max: 40,
            max_words: 1 << 16,
            screen_probes: 1_000,
            probes: 10_000,
        }
    }
}

/// Outcome of a Schottky validation run.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub probes: usize,
    pub adversarial: usize,
    /// Smallest `ν_s{h A γ}` seen.
    pub min_left: f64,
    /// Smallest `ν_s{γ A h}` seen.
    pub min_right: f64,
    /// `min(min_left, min_right) − (1 − ρ)`.
    pub worst_margin: f64,
    pub passed: bool,
}

/// What the search settled on.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildReport {
    pub m: usize,
    pub eps_exponent: u32,
    pub support: usize,
    pub sets: usize,
    pub worst_kill_u: f64,
    pub worst_kill_w: f64,
    pub configurations_tried: usize,
    pub validation: ValidationReport,
}

struct WordData {
    letters: Vec<usize>,
    base: f64,
    product: Matrix,
    sqz: f64,
    u: DVector<f64>,
    w: DVector<f64>,
}

fn enumerate_words(atoms: &[Matrix], weights: &[f64], m: usize) -> Vec<WordData> {
    let s = atoms.len();
    let d = atoms[0].dim();
    let mut out = Vec::with_capacity(s.pow(m as u32));
    let mut letters = Vec::with_capacity(m);
    let mut stack = vec![(ExteriorProduct::new(d, 2), 1.0)];
    fn rec(
        atoms: &[Matrix],
        weights: &[f64],
        m: usize,
        letters: &mut Vec<usize>,
        stack: &mut Vec<(ExteriorProduct, f64)>,
        out: &mut Vec<WordData>,
    ) {
        if letters.len() == m {
            let (acc, base) = stack.last().expect("non-empty");
            let sd = singular_data(acc.product());
            out.push(WordData {
                letters: letters.clone(),
                base: *base,
                product: acc.product().clone(),
                sqz: acc.sqz(1),
                u: sd.left.column(0).into_owned(),
                w: sd.right.column(0).into_owned(),
            });
            return;
        }
        for (l, g) in atoms.iter().enumerate() {
            let (mut acc, base) = stack.last().expect("non-empty").clone();
            acc.push(g);
            stack.push((acc, base * weights[l]));
            letters.push(l);
            rec(atoms, weights, m, letters, stack, out);
            letters.pop();
            stack.pop();
        }
    }
    rec(atoms, weights, m, &mut letters, &mut stack, &mut out);
    out
}

/// Largest `ν`-mass of support directions inside one kill region of width
/// `eps` around a hyperplane `y^⊥`. Exact sliding window on angles for
/// `d = 2`; for larger `d` the hyperplanes orthogonal to each center are
/// used. Returns the mass and the normal `y` of the worst region.
fn worst_kill(dirs: &[(DVector<f64>, f64)], eps: f64, centers: &[DVector<f64>]) -> (f64, DVector<f64>) {
    let d = dirs[0].0.len();
    if d == 2 {
        let half = eps.min(1.0).asin();
        let mut ang: Vec<(f64, f64)> = dirs
            .iter()
            .map(|(v, m)| (v[1].atan2(v[0]).rem_euclid(std::f64::consts::PI), *m))
            .collect();
        ang.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = ang.len();
        let pi = std::f64::consts::PI;
        // Two-pointer sweep over the angles doubled around the circle.
        let at = |k: usize| if k >= n { ang[k - n].0 + pi } else { ang[k].0 };
        let (mut best, mut best_mid) = (0.0, 0.0);
        let (mut j, mut mass) = (0, 0.0);
        for i in 0..n {
            if j < i {
                j = i;
                mass = 0.0;
            }
            while j < i + n && at(j) - at(i) <= 2.0 * half {
                mass += ang[j % n].1;
                j += 1;
            }
            if mass > best {
                best = mass;
                best_mid = at(i) + half;
            }
            mass -= ang[i].1;
        }
        // The normal to the worst line.
        let y = DVector::from_vec(vec![-best_mid.sin(), best_mid.cos()]);
        (best, y)
    } else {
        let mut best = (0.0, DVector::zeros(d));
        for c in centers {
            // The kill region of y ⊥ c: directions nearly orthogonal to y.
            let y = orth_to(c, None);
            let mass: f64 = dirs.iter().filter(|(v, _)| v.dot(&y).abs() < eps).map(|p| p.1).sum();
            if mass > best.0 {
                best = (mass, y);
            }
        }
        best
    }
}

/// A unit vector orthogonal to `a` (and to `b` when given), deterministic.
fn orth_to(a: &DVector<f64>, b: Option<&DVector<f64>>) -> DVector<f64> {
    let d = a.len();
    let mut basis = vec![a / a.norm()];
    if let Some(b) = b {
        let mut b = b - &basis[0] * basis[0].dot(b);
        if b.norm() > 1e-12 {
            b /= b.norm();
            basis.push(b);
        }
    }
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        for q in &basis {
            e -= q * q.dot(&e);
        }
        if e.norm() > 1e-6 {
            return &e / e.norm();
        }
    }
    unreachable!("a proper subspace has an orthogonal direction")
}

/// Random unit vector orthogonal to `a`.
fn random_orth(a: &DVector<f64>, rng: &mut RngStream) -> DVector<f64> {
    let a = a / a.norm();
    loop {
        let mut v = gaussian_vector(a.len(), rng);
        v -= &a * a.dot(&v);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn rank_one(x: &DVector<f64>, y: &DVector<f64>) -> Matrix {
    Matrix::outer(x, y)
}

/// Rank-one probes aimed at the kill regions of the system: `x yᵀ` with `y`
/// orthogonal to a center's (or a support word's) image direction, and with
/// `x` orthogonal to its functional.
fn adversarial_probes(sys: &SchottkySystem, rng: &mut RngStream, max_words: usize) -> Vec<Matrix> {
    let d = sys.dim();
    let mut us: Vec<DVector<f64>> = sys.centers.iter().map(|c| c.0.clone()).collect();
    let mut ws: Vec<DVector<f64>> = sys.centers.iter().map(|c| c.1.clone()).collect();
    let step = (sys.words.len() / max_words.max(1)).max(1);
    for w in sys.words.iter().step_by(step) {
        let c = cones(&w.product, 1.0);
        us.push(c.top_u().vector().clone());
        ws.push(c.top_w().vector().clone());
    }
    let us = dedupe(us, 0.0);
    let ws = dedupe(ws, 0.0);
    let mut out = Vec::new();
    for u in &us {
        let y = if d == 2 { orth_to(u, None) } else { random_orth(u, rng) };
        out.push(rank_one(&gaussian_vector(d, rng), &y));
    }
    for w in &ws {
        let x = if d == 2 { orth_to(w, None) } else { random_orth(w, rng) };
        out.push(rank_one(&x, &gaussian_vector(d, rng)));
    }
    if d >= 3 {
        for (i, a) in us.iter().enumerate().take(64) {
            for b in us.iter().skip(i + 1).take(64) {
                out.push(rank_one(&gaussian_vector(d, rng), &orth_to(a, Some(b))));
            }
        }
        for (i, a) in ws.iter().enumerate().take(64) {
            for b in ws.iter().skip(i + 1).take(64) {
                out.push(rank_one(&orth_to(a, Some(b)), &gaussian_vector(d, rng)));
            }
        }
    }
    let weighted_u: Vec<(DVector<f64>, f64)> = sys
        .words
        .iter()
        .map(|w| (cones(&w.product, 1.0).top_u().vector().clone(), w.weight))
        .collect();
    let weighted_w: Vec<(DVector<f64>, f64)> = sys
        .words
        .iter()
        .map(|w| (cones(&w.product, 1.0).top_w().vector().clone(), w.weight))
        .collect();
    let (_, yu) = worst_kill(&weighted_u, sys.eps, &us);
    let (_, yw) = worst_kill(&weighted_w, sys.eps, &ws);
    if yu.norm() > 0.0 {
        out.push(rank_one(&gaussian_vector(d, rng), &yu));
    }
    if yw.norm() > 0.0 {
        out.push(rank_one(&yw, &gaussian_vector(d, rng)));
    }
    out
}

/// Direction sweeps (`d = 2`): rank-one probes with `y` and `x` on a grid of
/// angles.
fn sweep_probes(d: usize, count: usize) -> Vec<Matrix> {
    if d != 2 || count == 0 {
        return Vec::new();
    }
    let half = count / 2;
    let mut out = Vec::with_capacity(count);
    for t in 0..half {
        let a = std::f64::consts::PI * t as f64 / half as f64;
        let y = DVector::from_vec(vec![a.cos(), a.sin()]);
        let x = DVector::from_vec(vec![(a * 1.7).cos(), (a * 1.7).sin()]);
        out.push(rank_one(&x, &y));
        out.push(rank_one(&y, &x));
    }
    out
}

/// Checks the Schottky inequalities on an explicit probe list.
pub fn validate_with_probes(sys: &SchottkySystem, probes: &[Matrix]) -> ValidationReport {
    validate_inner(sys, probes, 0)
}

fn validate_inner(sys: &SchottkySystem, probes: &[Matrix], adversarial: usize) -> ValidationReport {
    let masses: Vec<(f64, f64)> = probes.par_iter().map(|h| sys.masses(h)).collect();
    let min_left = masses.iter().map(|m| m.0).fold(1.0, f64::min);
    let min_right = masses.iter().map(|m| m.1).fold(1.0, f64::min);
    let worst_margin = min_left.min(min_right) - (1.0 - sys.rho);
    ValidationReport {
        probes: probes.len(),
        adversarial,
        min_left,
        min_right,
        worst_margin,
        passed: worst_margin >= -1e-12,
    }
}

/// Checks `ν_s{h A^ε γ} ≥ 1 − ρ` and `ν_s{γ A^ε h} ≥ 1 − ρ` on at least
/// `probes` probes: adversarial rank-one probes aimed at every center and
/// support direction, a direction sweep, and Gaussian matrices for the rest.
/// Masses are exact sums over the finite support.
pub fn validate_schottky(sys: &SchottkySystem, probes: usize, rng: &RngStream) -> ValidationReport {
    let mut r = rng.derive(0);
    let mut list = adversarial_probes(sys, &mut r, 512);
    let adversarial = list.len();
    list.extend(sweep_probes(sys.dim(), (probes / 10).min(2_000)));
    let random = probes.saturating_sub(list.len());
    let extra: Vec<Matrix> = (0..random as u64)
        .into_par_iter()
        .map(|t| gaussian_matrix(sys.dim(), &mut rng.derive(t + 1)))
        .collect();
    list.extend(extra);
    validate_inner(sys, &list, adversarial)
}

fn rank_one_distance(h: &Matrix, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let e = h.entries();
    let hn = e / spectral_norm(e);
    let p = u * w.transpose();
    spectral_norm(&(&hn - &p)).min(spectral_norm(&(&hn + &p)))
}

/// Builds a ρ-Schottky system for a finite step distribution by searching
/// word lengths `m ≤ m_max` and scales `ε = 2^{-k}`.
///
/// For each `(m, ε)` every word is enumerated; the words with gap at least
/// `K(|log ε| + log 2)` provide image directions `u` and functionals `w`,
/// deduplicated at scale `ε/3`. Each pair of representatives defines a center
/// `π = u wᵀ` and a set `S_π` of words whose normalized product is within `ε`
/// of `±π`. Words get weight proportional to
/// `ν^{⊗m}(word) · Σ_{π ∋ word} 1/ν^{⊗m}(S_π)`. Configurations whose worst
/// single kill region already exceeds `ρ` are skipped; the rest are screened
/// and then validated with `params.probes` probes.
pub fn build_schottky(
    nu: &MeasureSpec,
    params: &SchottkyParams,
    rng: &RngStream,
) -> Result<(SchottkySystem, BuildReport), SchottkyError> {
    let atoms = nu.atoms().ok_or(SchottkyError::NotFinite)?.to_vec();
    let weights = nu.weights().expect("finite").to_vec();
    if !(params.rho > 0.0 && params.rho <= 0.2) {
        return Err(SchottkyError::BadRho(params.rho));
    }
    if nu.dim() < 2 {
        return Err(SchottkyError::Dimension);
    }
    let mut best = (f64::INFINITY, 0usize, 0u32);
    let mut overall_max_sqz = f64::NEG_INFINITY;
    let mut tried = 0;
    for m in 1..=params.m_max {
        if (atoms.len() as f64).powi(m as i32) > params.max_words as f64 {
            break;
        }
        let words = enumerate_words(&atoms, &weights, m);
        let max_sqz = words.iter().map(|w| w.sqz).fold(f64::NEG_INFINITY, f64::max);
        overall_max_sqz = overall_max_sqz.max(max_sqz);
        for k in 1..=params.k_max {
            let eps = 2f64.powi(-(k as i32));
            let threshold = params.k_param * (eps.ln().abs() + 2f64.ln());
            if max_sqz < threshold {
                break;
            }
            tried += 1;
            let Some((system, kill_u, kill_w)) =
                configure(&atoms, &weights, &words, m, eps, threshold, params)?
            else {
                continue;
            };
            let kill = kill_u.max(kill_w);
            if kill < best.0 {
                best = (kill, m, k);
            }
            if kill > params.rho {
                continue;
            }
            let screen = validate_schottky(&system, params.screen_probes, &rng.derive(tried as u64));
            if !screen.passed {
                continue;
            }
            let validation = validate_schottky(&system, params.probes, &rng.derive(1 << 32));
            if !validation.passed {
                continue;
            }
            let report = BuildReport {
                m,
                eps_exponent: k,
                support: system.words.len(),
                sets: system.centers.len(),
                worst_kill_u: kill_u,
                worst_kill_w: kill_w,
                configurations_tried: tried,
                validation,
            };
            return Ok((system, report));
        }
    }
    if overall_max_sqz < params.k_param * 2.0 * 2f64.ln() {
        return Err(SchottkyError::NotProximal { max_sqz: overall_max_sqz });
    }
    Err(SchottkyError::Exhausted { best_kill: best.0, best_m: best.1, best_k: best.2, rho: params.rho })
}

type Configured = Option<(SchottkySystem, f64, f64)>;

fn configure(
    atoms: &[Matrix],
    weights: &[f64],
    words: &[WordData],
    m: usize,
    eps: f64,
    threshold: f64,
    params: &SchottkyParams,
) -> Result<Configured, SchottkyError> {
    let mut eligible: Vec<&WordData> = words.iter().filter(|w| w.sqz >= threshold).collect();
    eligible.sort_by(|a, b| b.base.total_cmp(&a.base));
    let us = dedupe(eligible.iter().map(|w| w.u.clone()), eps / 3.0);
    let ws = dedupe(eligible.iter().map(|w| w.w.clone()), eps / 3.0);
    let reach = eps * (1.0 + 1e-9) + (-threshold).exp();
    // Membership of each eligible word in the sets S_(i,j).
    let mut members: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (wi, w) in eligible.iter().enumerate() {
        let near_u: Vec<usize> = (0..us.len()).filter(|&i| vec_dist(&w.u, &us[i]) < reach).collect();
        let near_w: Vec<usize> = (0..ws.len()).filter(|&j| vec_dist(&w.w, &ws[j]) < reach).collect();
        for &i in &near_u {
            for &j in &near_w {
                if rank_one_distance(&w.product, &us[i], &ws[j]) < eps {
                    members.entry((i, j)).or_default().push(wi);
                }
            }
        }
    }
    if members.is_empty() {
        return Ok(None);
    }
    let mut keys: Vec<(usize, usize)> = members.keys().copied().collect();
    keys.sort_unstable();
    let n_sets = keys.len() as f64;
    let mut f = vec![0.0; eligible.len()];
    for key in &keys {
        let set = &members[key];
        let mass: f64 = set.iter().map(|&i| eligible[i].base).sum();
        for &i in set {
            f[i] += 1.0 / mass;
        }
    }
    let mut chosen: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut dirs_u = Vec::new();
    let mut dirs_w = Vec::new();
    for (i, w) in eligible.iter().enumerate() {
        if f[i] > 0.0 {
            let weight = f[i] * w.base / n_sets;
            chosen.push((w.letters.clone(), weight));
            dirs_u.push((w.u.clone(), weight));
            dirs_w.push((w.w.clone(), weight));
        }
    }
    // Renormalize away rounding so the weights sum to one.
    let total: f64 = chosen.iter().map(|c| c.1).sum();
    for c in &mut chosen {
        c.1 /= total;
    }
    for d in dirs_u.iter_mut().chain(dirs_w.iter_mut()) {
        d.1 /= total;
    }
    let (kill_u, _) = worst_kill(&dirs_u, eps, &us);
    let (kill_w, _) = worst_kill(&dirs_w, eps, &ws);
    let centers = keys.iter().map(|&(i, j)| (us[i].clone(), ws[j].clone())).collect();
    let system = SchottkySystem::assemble(
        atoms.to_vec(),
        weights.to_vec(),
        m,
        eps,
        params.rho,
        params.k_param,
        chosen,
        None,
        centers,
    )?;
    Ok(Some((system, kill_u, kill_w)))
}

/// Largest spread `d([u], [u'])` of image directions inside any set `S_k`.
pub fn max_set_diameter(sys: &SchottkySystem) -> f64 {
    let mut worst: f64 = 0.0;
    let dirs: Vec<DVector<f64>> =
        sys.words.iter().map(|w| cones(&w.product, 1.0).top_u().vector().clone()).collect();
    for (u, w) in &sys.centers {
        let inside: Vec<usize> = (0..sys.words.len())
            .filter(|&i| rank_one_distance(&sys.words[i].product, u, w) < sys.eps)
            .collect();
        for (a, &i) in inside.iter().enumerate() {
            for &j in &inside[a + 1..] {
                worst = worst.max(vec_dist(&dirs[i], &dirs[j]));
            }
        }
    }
    worst
}

/// `log ‖Π(word)‖` computed from the stored product.
pub fn word_log_norm(sys: &SchottkySystem, i: usize) -> f64 {
    op_norm(&sys.words[i].product)
}
