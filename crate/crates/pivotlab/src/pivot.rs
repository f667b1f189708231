//! Pivotal extraction: ping-pong block sequences, the weighted pivot
//! algorithm, the pivoting lemmas' random indices, and the toy random walk on
//! the free Coxeter group with three generators.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::{alignment_margin, CoarseAlignment, Relation};
use crate::measures::RngStream;
use crate::projgeo::{op_norm, ExteriorProduct, Matrix};
use crate::schottky::SchottkySystem;
use crate::stats::{chi_square_gof, line_fit, normal_quantile, wilson_interval, ChiSquareResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PivotError {
    #[error("grouping lengths exceed the letter count")]
    Lengths,
    #[error("a grouped word needs an odd number of blocks")]
    BlockParity,
    #[error("not enough weights: {have} for {need} steps")]
    Weights { have: usize, need: usize },
}

/// Number of successes before the first failure in Bernoulli(`q`) trials,
/// i.e. a draw from `G_q{k} = q^k (1 − q)`.
pub fn geometric<R: Rng + ?Sized>(q: f64, rng: &mut R) -> usize {
    let mut k = 0;
    while rng.random::<f64>() < q {
        k += 1;
    }
    k
}

/// A letter sequence cut into consecutive blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedWord {
    atoms: Vec<Matrix>,
    letters: Vec<usize>,
    lengths: Vec<usize>,
    starts: Vec<usize>,
}

impl GroupedWord {
    pub fn new(atoms: Vec<Matrix>, letters: Vec<usize>, lengths: Vec<usize>) -> Result<Self, PivotError> {
        let mut starts = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &l in &lengths {
            starts.push(at);
            at += l;
        }
        if at > letters.len() || letters.iter().any(|&l| l >= atoms.len()) {
            return Err(PivotError::Lengths);
        }
        Ok(GroupedWord { atoms, letters, lengths, starts })
    }

    pub fn atoms(&self) -> &[Matrix] {
        &self.atoms
    }

    pub fn letters(&self) -> &[usize] {
        &self.letters
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn block_count(&self) -> usize {
        self.lengths.len()
    }

    /// Letters of block `k`.
    pub fn block(&self, k: usize) -> &[usize] {
        &self.letters[self.starts[k]..self.starts[k] + self.lengths[k]]
    }

    /// First letter index of block `k`.
    pub fn start(&self, k: usize) -> usize {
        self.starts[k]
    }

    /// Product of the letters in `[from, to)`; the identity when empty.
    pub fn range_product(&self, from: usize, to: usize) -> Matrix {
        let d = self.atoms[0].dim();
        Matrix::product(d, self.letters[from..to].iter().map(|&l| &self.atoms[l]))
    }

    pub fn block_product(&self, k: usize) -> Matrix {
        self.range_product(self.starts[k], self.starts[k] + self.lengths[k])
    }

    /// Total number of grouped letters.
    pub fn grouped_len(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// `ν_s{γ : f A γ A h}` by exact summation over the support.
fn mass_between<R: Relation>(sys: &SchottkySystem, rel: &R, f: &Matrix, h: &Matrix) -> f64 {
    sys.words()
        .iter()
        .filter(|w| rel.related(f, &w.product) && rel.related(&w.product, h))
        .map(|w| w.weight)
        .sum()
}

fn mass_between2<R: Relation>(sys: &SchottkySystem, rel: &R, f: &Matrix, h: &Matrix, h2: &Matrix) -> f64 {
    sys.words()
        .iter()
        .filter(|w| {
            rel.related(f, &w.product) && rel.related(&w.product, h) && rel.related(&w.product, h2)
        })
        .map(|w| w.weight)
        .sum()
}

/// Penalty functions of the weighted pivot algorithm, computed exactly over
/// the finite support of the Schottky measure. Values above 1 (which the
/// Schottky property rules out) are clamped and counted.
pub struct Penalties<'a, R: Relation> {
    sys: &'a SchottkySystem,
    rel: &'a R,
    rho: f64,
    clamps: usize,
}

impl<'a, R: Relation> Penalties<'a, R> {
    pub fn new(sys: &'a SchottkySystem, rel: &'a R) -> Self {
        Penalties { sys, rel, rho: sys.rho(), clamps: 0 }
    }

    /// `(1 − 2ρ) 1{f A g A h} / ν_s{γ : f A γ A h}`.
    pub fn p(&mut self, f: &Matrix, g: &Matrix, h: &Matrix) -> f64 {
        if !(self.rel.related(f, g) && self.rel.related(g, h)) {
            return 0.0;
        }
        self.clamp((1.0 - 2.0 * self.rho) / mass_between(self.sys, self.rel, f, h))
    }

    /// `(1 − 3ρ) 1{f A g A h} 1{g A h'} / ν_s{γ : f A γ A h, γ A h'}`.
    pub fn p_prime(&mut self, f: &Matrix, g: &Matrix, h: &Matrix, h2: &Matrix) -> f64 {
        if !(self.rel.related(f, g) && self.rel.related(g, h) && self.rel.related(g, h2)) {
            return 0.0;
        }
        self.clamp((1.0 - 3.0 * self.rho) / mass_between2(self.sys, self.rel, f, h, h2))
    }

    fn clamp(&mut self, p: f64) -> f64 {
        if p > 1.0 {
            self.clamps += 1;
            1.0
        } else {
            p
        }
    }

    pub fn clamps(&self) -> usize {
        self.clamps
    }
}

/// Ping-pong block sequence: even blocks follow the law `κ̃` (base even
/// chunks of `m` letters from `(ν^{⊗m} − αν̃_s)/(1 − α)`, `G_{1−α}` of them,
/// alternating with Schottky words until a penalty test accepts an aligned
/// triple, closed by one more base even block); odd blocks are `ν̃_s` words.
///
/// Blocks are appended until at least `n_letters` letters are grouped; the
/// sequence always ends with an even block.
pub fn ping_pong_extract(sys: &SchottkySystem, n_letters: usize, rng: &mut RngStream) -> GroupedWord {
    let rel = CoarseAlignment { eps: sys.eps() };
    ping_pong_extract_with(sys, &rel, n_letters, rng)
}

/// [`ping_pong_extract`] for an arbitrary relation.
pub fn ping_pong_extract_with<R: Relation>(
    sys: &SchottkySystem,
    rel: &R,
    n_letters: usize,
    rng: &mut RngStream,
) -> GroupedWord {
    let mut letters = Vec::with_capacity(n_letters + 8 * sys.m());
    let mut lengths = Vec::new();
    let mut pen = Penalties::new(sys, rel);
    loop {
        let len = kappa_block(sys, &mut pen, &mut letters, rng);
        lengths.push(len);
        if letters.len() >= n_letters {
            break;
        }
        let w = sys.sample(rng);
        letters.extend_from_slice(&sys.words()[w].letters);
        lengths.push(sys.m());
    }
    GroupedWord::new(sys.atoms().to_vec(), letters, lengths).expect("consistent by construction")
}

/// Appends `G_{1−α}` chunks of the complement law and returns their length.
fn base_even_block<R: Rng + ?Sized>(sys: &SchottkySystem, out: &mut Vec<usize>, rng: &mut R) -> usize {
    let chunks = geometric(1.0 - sys.alpha(), rng);
    let m = sys.m();
    let mut word = vec![0; m];
    for _ in 0..chunks {
        // Rejection sampling of (ν^{⊗m} − αν̃_s)/(1 − α).
        loop {
            for x in word.iter_mut() {
                *x = sys.sample_letter(rng);
            }
            let accept = 1.0 - sys.alpha() * sys.weight_of(&word) / sys.base_mass(&word);
            if rng.random::<f64>() < accept {
                break;
            }
        }
        out.extend_from_slice(&word);
    }
    chunks * m
}

/// One `κ̃` block: `B_0 ⊙ B_1 ⊙ … ⊙ B_{2k+2}` where `k` is the first index
/// with `τ_k < P(B_0⋯B_{2k}, B_{2k+1}, B_{2k+2})`.
fn kappa_block<R: Relation>(
    sys: &SchottkySystem,
    pen: &mut Penalties<'_, R>,
    out: &mut Vec<usize>,
    rng: &mut RngStream,
) -> usize {
    let d = sys.dim();
    let start = out.len();
    base_even_block(sys, out, rng);
    let mut prefix = Matrix::product(d, out[start..].iter().map(|&l| &sys.atoms()[l]));
    loop {
        let w = sys.sample(rng);
        let word = &sys.words()[w];
        out.extend_from_slice(&word.letters);
        let h_start = out.len();
        base_even_block(sys, out, rng);
        let h = Matrix::product(d, out[h_start..].iter().map(|&l| &sys.atoms()[l]));
        let tau: f64 = rng.random();
        if tau < pen.p(&prefix, &word.product, &h) {
            return out.len() - start;
        }
        prefix = prefix.mul(&word.product).mul(&h);
    }
}

/// What happened at one pivot step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PivotEvent {
    Advance,
    /// Backtrack by the given number of levels, `m_j − m_{j+1}`.
    Backtrack(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PivotTrace {
    pub rho: f64,
    /// `m_0, …, m_J`.
    pub m: Vec<usize>,
    pub events: Vec<PivotEvent>,
    pub taus: Vec<f64>,
    /// Block lengths `p^J_0, …, p^J_{2m_J}` after the last step.
    pub lengths: Vec<usize>,
    /// Number of leading blocks unchanged over the last `j_stab` steps.
    pub stable_blocks: usize,
    /// A block declared final was later modified, or nothing stabilized.
    pub flagged: bool,
    /// Penalty values clamped to 1 (a Schottky violation on the fly).
    pub clamps: usize,
    /// Start letter of every final block.
    pub starts: Vec<usize>,
}

/// Steps a block must survive before it is declared final.
pub const J_STAB: usize = 200;

impl PivotTrace {
    pub fn steps(&self) -> usize {
        self.events.len()
    }

    /// Line-oriented dump: `j m_j advance` or `j m_j backtrack k` per step,
    /// then `p` followed by the block lengths.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (j, e) in self.events.iter().enumerate() {
            match e {
                PivotEvent::Advance => writeln!(s, "{j} {} advance", self.m[j]).unwrap(),
                PivotEvent::Backtrack(k) => writeln!(s, "{j} {} backtrack {k}", self.m[j]).unwrap(),
            }
        }
        let p: Vec<String> = self.lengths.iter().map(usize::to_string).collect();
        writeln!(s, "p {}", p.join(" ")).unwrap();
        s
    }
}

struct Block {
    len: usize,
    product: Matrix,
}

/// Runs the weighted pivot algorithm over all full steps of `grouped`
/// (`J = (blocks − 1)/2`), drawing the weights `τ_j` from `rng`.
pub fn run_pivot<R: Relation>(
    grouped: &GroupedWord,
    sys: &SchottkySystem,
    rel: &R,
    j_stab: usize,
    rng: &mut RngStream,
) -> Result<PivotTrace, PivotError> {
    let steps = grouped.block_count().saturating_sub(1) / 2;
    let taus: Vec<f64> = (0..steps).map(|_| rng.random()).collect();
    run_pivot_with_taus(grouped, sys, rel, &taus, j_stab)
}

/// Runs the weighted pivot algorithm with scripted weights.
pub fn run_pivot_with_taus<R: Relation>(
    grouped: &GroupedWord,
    sys: &SchottkySystem,
    rel: &R,
    taus: &[f64],
    j_stab: usize,
) -> Result<PivotTrace, PivotError> {
    let nb = grouped.block_count();
    if nb % 2 == 0 {
        return Err(PivotError::BlockParity);
    }
    let steps = (nb - 1) / 2;
    if taus.len() < steps {
        return Err(PivotError::Weights { have: taus.len(), need: steps });
    }
    let raw: Vec<Matrix> = (0..nb).map(|k| grouped.block_product(k)).collect();
    let w = grouped.lengths();
    let mut pen = Penalties::new(sys, rel);
    let mut blocks = vec![Block { len: w[0], product: raw[0].clone() }];
    let mut m = vec![0usize];
    let mut last_visit = vec![0usize];
    let mut events = Vec::with_capacity(steps);
    let mut grouped_so_far = w[0];
    for j in 0..steps {
        let mj = m[j];
        let (g, h) = (&raw[2 * j + 1], &raw[2 * j + 2]);
        grouped_so_far += w[2 * j + 1] + w[2 * j + 2];
        let next;
        if taus[j] < pen.p(&blocks[2 * mj].product, g, h) {
            blocks.push(Block { len: w[2 * j + 1], product: g.clone() });
            blocks.push(Block { len: w[2 * j + 2], product: h.clone() });
            next = mj + 1;
            events.push(PivotEvent::Advance);
        } else {
            // Largest level k < m_j whose candidate survives the P' test.
            let mut suffix = blocks[2 * mj].product.mul(g).mul(h);
            let mut suffix_len = blocks[2 * mj].len + w[2 * j + 1] + w[2 * j + 2];
            let mut target = 0;
            let mut k = mj;
            while k > 0 {
                k -= 1;
                let l = last_visit[k];
                let (f, c) = (&blocks[2 * k].product, &blocks[2 * k + 1].product);
                let pass = taus[l] < pen.p_prime(f, c, &raw[2 * l + 2], &suffix);
                suffix = f.mul(c).mul(&suffix);
                suffix_len += blocks[2 * k].len + blocks[2 * k + 1].len;
                if pass {
                    target = k;
                    break;
                }
            }
            blocks.truncate(2 * target);
            blocks.push(Block { len: suffix_len, product: suffix });
            next = target;
            events.push(PivotEvent::Backtrack(mj - next));
        }
        debug_assert!(next == mj + 1 || next < mj.max(1));
        m.push(next);
        if last_visit.len() <= next {
            last_visit.resize(next + 1, 0);
        }
        last_visit[next] = j + 1;
        // p̄^{j+1}_{2m_{j+1}+1} = w̄_{2j+3}.
        assert_eq!(blocks.iter().map(|b| b.len).sum::<usize>(), grouped_so_far);
        assert_eq!(blocks.len(), 2 * next + 1);
    }
    let lengths: Vec<usize> = blocks.iter().map(|b| b.len).collect();
    let (stable_blocks, flagged) = stability(&m, j_stab);
    let mut starts = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &l in &lengths {
        starts.push(at);
        at += l;
    }
    Ok(PivotTrace {
        rho: sys.rho(),
        m,
        events,
        taus: taus[..steps].to_vec(),
        lengths,
        stable_blocks,
        flagged,
        clamps: pen.clamps(),
        starts,
    })
}

/// Blocks below level `min(m_{J−j_stab..=J})` are final; a declared level
/// that is later undercut flags the trace.
fn stability(m: &[usize], j_stab: usize) -> (usize, bool) {
    let n = m.len();
    if n <= j_stab {
        return (0, true);
    }
    let mut declared = 0;
    let mut flagged = false;
    for j in j_stab..n {
        if m[j] < declared {
            flagged = true;
        }
        let level = *m[j - j_stab..=j].iter().min().expect("non-empty");
        declared = declared.max(level);
    }
    let final_level = *m[n - 1 - j_stab..].iter().min().expect("non-empty");
    (2 * final_level, flagged || final_level == 0)
}

/// Result of checking one completed trace against the extraction theorem.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionReport {
    /// (a) Blocks partition the grouped letters and odd blocks are original
    /// Schottky words.
    pub concatenation_ok: bool,
    /// `|log‖Π blocks‖ − log‖Π letters‖|`.
    pub product_log_error: f64,
    /// (b) Partial-product pairs checked and failures at `ε/4`.
    pub pairs_checked: usize,
    pub alignment_violations: usize,
    /// Smallest `log(‖gh‖/(‖g‖‖h‖)) − log(ε/4)` seen.
    pub worst_margin: f64,
    /// Every odd block has gap at least `8|log ε| + 10 log 2`.
    pub sqz_hypothesis: bool,
    /// Every odd block has gap at least the system threshold.
    pub odd_sqz_ok: bool,
}

impl ExtractionReport {
    /// Names of the violated items, empty when sound.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.concatenation_ok || !(self.product_log_error < 1e-6) {
            v.push("concatenation identity");
        }
        if self.alignment_violations > 0 {
            v.push("partial-product alignment");
        }
        if !self.odd_sqz_ok {
            v.push("odd-block gap");
        }
        v
    }
}

/// Checks items (a) and (b) on one trace: concatenation exactness, and
/// `γ_i⋯γ_{j−1} A^{ε/4} γ_j⋯γ_{k−1}` for all adjacent final blocks plus
/// `samples` random triples `i < j < k` of final-block boundaries.
pub fn verify_extraction(
    trace: &PivotTrace,
    grouped: &GroupedWord,
    sys: &SchottkySystem,
    samples: usize,
    rng: &mut RngStream,
) -> ExtractionReport {
    let eps = sys.eps();
    let nb = trace.lengths.len();
    let total: usize = trace.lengths.iter().sum();
    let mut concat = total == grouped.grouped_len();
    // Odd final blocks must coincide with original odd blocks.
    let raw_odd: std::collections::HashSet<(usize, usize)> = (0..grouped.block_count())
        .filter(|k| k % 2 == 1)
        .map(|k| (grouped.start(k), grouped.lengths()[k]))
        .collect();
    for k in (1..nb).step_by(2) {
        concat &= raw_odd.contains(&(trace.starts[k], trace.lengths[k]));
    }
    let d = sys.dim();
    let products: Vec<Matrix> =
        (0..nb).map(|k| grouped.range_product(trace.starts[k], trace.starts[k] + trace.lengths[k])).collect();
    let by_blocks = Matrix::product(d, products.iter());
    let by_letters = grouped.range_product(0, total);
    let product_log_error = (op_norm(&by_blocks) - op_norm(&by_letters)).abs() / total.max(1) as f64;

    let span = |i: usize, j: usize| Matrix::product(d, products[i..j].iter());
    let mut pairs = Vec::new();
    for j in 1..nb {
        pairs.push((j - 1, j, j + 1));
    }
    if nb >= 3 {
        for _ in 0..samples {
            let mut t = [rng.random_range(0..=nb), rng.random_range(0..=nb), rng.random_range(0..=nb)];
            t.sort_unstable();
            if t[0] < t[1] && t[1] < t[2] {
                pairs.push((t[0], t[1], t[2]));
            }
        }
    }
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for &(i, j, k) in &pairs {
        let margin = alignment_margin(&span(i, j), &span(j, k), eps / 4.0);
        worst = worst.min(margin);
        if margin < 0.0 {
            violations += 1;
        }
    }
    let strong = 8.0 * eps.ln().abs() + 10.0 * 2f64.ln();
    let mut sqz_hypothesis = true;
    let mut odd_sqz_ok = true;
    for k in (1..nb).step_by(2) {
        let mut acc = ExteriorProduct::new(d, 2);
        for &l in &grouped.letters()[trace.starts[k]..trace.starts[k] + trace.lengths[k]] {
            acc.push(&grouped.atoms()[l]);
        }
        let s = acc.sqz(1);
        sqz_hypothesis &= s >= strong;
        odd_sqz_ok &= s >= sys.threshold() - 1e-9;
    }
    ExtractionReport {
        concatenation_ok: concat,
        product_log_error,
        pairs_checked: pairs.len(),
        alignment_violations: violations,
        worst_margin: worst,
        sqz_hypothesis,
        odd_sqz_ok,
    }
}

/// Accumulates final-block statistics across many runs for items (c) and
/// (d) of the extraction theorem.
#[derive(Clone, Debug, Default)]
pub struct ExtractionStats {
    /// Counts of final odd blocks by support index of the Schottky system.
    pub odd_counts: Vec<usize>,
    /// Lengths of stable final blocks (all parities).
    pub block_lengths: Vec<usize>,
}

/// Items (c) and (d) over the accumulated runs.
#[derive(Clone, Debug, PartialEq)]
pub struct LawReport {
    pub odd_blocks: usize,
    /// Words whose Wilson lower bound exceeds `ν̃_s/(1 − 2ρ)`.
    pub density_violations: usize,
    /// Largest `p̂ (1 − 2ρ)/ν̃_s` over the support.
    pub max_density_ratio: f64,
    /// Fitted `β` in `P(L > l) ≈ C e^{−βl}`.
    pub beta: f64,
    pub beta_se: f64,
}

impl ExtractionStats {
    pub fn new(sys: &SchottkySystem) -> Self {
        ExtractionStats { odd_counts: vec![0; sys.words().len()], block_lengths: Vec::new() }
    }

    /// Records the stable final blocks of a trace.
    pub fn add(&mut self, trace: &PivotTrace, grouped: &GroupedWord, sys: &SchottkySystem) {
        for k in 0..trace.stable_blocks {
            let (s, l) = (trace.starts[k], trace.lengths[k]);
            self.block_lengths.push(l);
            if k % 2 == 1 {
                if let Some(i) = sys.find(&grouped.letters()[s..s + l]) {
                    self.odd_counts[i] += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &ExtractionStats) {
        for (a, b) in self.odd_counts.iter_mut().zip(&other.odd_counts) {
            *a += b;
        }
        self.block_lengths.extend_from_slice(&other.block_lengths);
    }

    /// Density bound at 99% joint Wilson confidence (Bonferroni over the
    /// support) and an exponential fit of
    /// the empirical survival function over lengths with at least 10
    /// exceedances.
    pub fn report(&self, sys: &SchottkySystem) -> LawReport {
        let n: usize = self.odd_counts.iter().sum();
        let bound = 1.0 / (1.0 - 2.0 * sys.rho());
        let mut violations = 0;
        let mut worst: f64 = 0.0;
        let z = normal_quantile(1.0 - 0.005 / sys.words().len() as f64);
        for (c, w) in self.odd_counts.iter().zip(sys.words()) {
            let (lo, _) = wilson_interval(*c, n, z);
            if lo > w.weight * bound {
                violations += 1;
            }
            if n > 0 {
                worst = worst.max(*c as f64 / n as f64 / w.weight / bound);
            }
        }
        let mut lens = self.block_lengths.clone();
        lens.sort_unstable();
        let total = lens.len();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        if let Some(&max) = lens.last() {
            for l in 0..max {
                let exceed = total - lens.partition_point(|&x| x <= l);
                if exceed >= 10 {
                    xs.push(l as f64);
                    ys.push((exceed as f64 / total as f64).ln());
                }
            }
        }
        let (beta, beta_se) = if xs.len() >= 3 {
            let fit = line_fit(&xs, &ys);
            (-fit.slope, fit.slope_se)
        } else {
            (f64::NAN, f64::NAN)
        };
        LawReport { odd_blocks: n, density_violations: violations, max_density_ratio: worst, beta, beta_se }
    }
}

/// Advance and backtrack counts of the weighted pivot algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct PivotLaw {
    pub runs: usize,
    pub steps: usize,
    pub advances: usize,
    /// `depth_counts[k]`: backtracks by `k` levels; the last cell pools
    /// every deeper one.
    pub depth_counts: Vec<usize>,
    pub clamps: usize,
    pub flagged: usize,
}

/// Depth cells kept by [`sample_pivot_law`]; deeper backtracks are pooled.
pub const DEPTH_CELLS: usize = 12;

impl PivotLaw {
    pub fn advance_rate(&self) -> f64 {
        self.advances as f64 / self.steps as f64
    }

    /// Chi-square of the backtrack depths against
    /// `P(D = k | backtrack) = (1 − q) q^{k−1}`, `q = ρ/(1 − 2ρ)`, `k ≥ 1`.
    pub fn depth_fit(&self, rho: f64) -> ChiSquareResult {
        let q = rho / (1.0 - 2.0 * rho);
        let last = self.depth_counts.len() - 1;
        let probs: Vec<f64> = (1..=last)
            .map(|k| if k < last { (1.0 - q) * q.powi(k as i32 - 1) } else { q.powi(k as i32 - 1) })
            .collect();
        chi_square_gof(&self.depth_counts[1..], &probs)
    }
}

/// Runs independent ping-pong sequences of `letters` letters through the
/// pivot algorithm until `target_steps` steps at level `m_j ≥ min_level`
/// have been recorded (the laws are exact only away from the bottom level).
pub fn sample_pivot_law<R: Relation>(
    sys: &SchottkySystem,
    rel: &R,
    target_steps: usize,
    min_level: usize,
    letters: usize,
    rng: &RngStream,
) -> Result<PivotLaw, PivotError> {
    let mut law = PivotLaw {
        runs: 0,
        steps: 0,
        advances: 0,
        depth_counts: vec![0; DEPTH_CELLS + 1],
        clamps: 0,
        flagged: 0,
    };
    while law.steps < target_steps {
        let mut r = rng.derive(law.runs as u64);
        law.runs += 1;
        let grouped = ping_pong_extract(sys, letters, &mut r);
        let trace = run_pivot(&grouped, sys, rel, J_STAB, &mut r)?;
        law.clamps += trace.clamps;
        law.flagged += trace.flagged as usize;
        for (j, e) in trace.events.iter().enumerate() {
            if trace.m[j] < min_level {
                continue;
            }
            law.steps += 1;
            match e {
                PivotEvent::Advance => law.advances += 1,
                PivotEvent::Backtrack(k) => law.depth_counts[(*k).min(DEPTH_CELLS)] += 1,
            }
            if law.steps == target_steps {
                break;
            }
        }
    }
    Ok(law)
}

/// Aggregate of [`verify_extraction`] over many independent runs.
#[derive(Clone, Debug)]
pub struct ExtractionSummary {
    pub runs: usize,
    /// Runs with at least one violated item.
    pub failed_runs: usize,
    pub pairs_checked: usize,
    pub alignment_violations: usize,
    pub worst_margin: f64,
    /// Runs whose odd blocks all meet `8|log ε| + 10 log 2`.
    pub strong_hypothesis_runs: usize,
    pub stats: ExtractionStats,
}

/// Extracts, pivots and verifies `runs` sequences of `letters` letters.
pub fn check_extractions<R: Relation>(
    sys: &SchottkySystem,
    rel: &R,
    runs: usize,
    letters: usize,
    j_stab: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<ExtractionSummary, PivotError> {
    let results: Vec<Result<(ExtractionReport, ExtractionStats), PivotError>> = (0..runs as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let grouped = ping_pong_extract(sys, letters, &mut r);
            let trace = run_pivot(&grouped, sys, rel, j_stab, &mut r)?;
            let report = verify_extraction(&trace, &grouped, sys, samples, &mut r);
            let mut stats = ExtractionStats::new(sys);
            stats.add(&trace, &grouped, sys);
            Ok((report, stats))
        })
        .collect();
    let mut out = ExtractionSummary {
        runs,
        failed_runs: 0,
        pairs_checked: 0,
        alignment_violations: 0,
        worst_margin: f64::INFINITY,
        strong_hypothesis_runs: 0,
        stats: ExtractionStats::new(sys),
    };
    for res in results {
        let (report, stats) = res?;
        out.failed_runs += !report.violations().is_empty() as usize;
        out.pairs_checked += report.pairs_checked;
        out.alignment_violations += report.alignment_violations;
        out.worst_margin = out.worst_margin.min(report.worst_margin);
        out.strong_hypothesis_runs += report.sqz_hypothesis as usize;
        out.stats.merge(&stats);
    }
    Ok(out)
}

/// Groups of final blocks between consecutive visits of a class pair:
/// indices `k` with `φ_L(block 2k) = i` and `φ_R(block 2k+2) = j`.
pub fn cut_at_class_pair<L, R>(
    trace: &PivotTrace,
    grouped: &GroupedWord,
    phi_left: L,
    phi_right: R,
    pair: (usize, usize),
) -> Vec<usize>
where
    L: Fn(&Matrix) -> usize,
    R: Fn(&Matrix) -> usize,
{
    let nb = trace.stable_blocks.min(trace.lengths.len());
    let product = |k: usize| grouped.range_product(trace.starts[k], trace.starts[k] + trace.lengths[k]);
    (0..nb / 2)
        .filter(|&k| 2 * k + 2 < trace.lengths.len())
        .filter(|&k| phi_left(&product(2 * k)) == pair.0 && phi_right(&product(2 * k + 2)) == pair.1)
        .collect()
}

/// Outcome of the pivoting technique on one ping-pong sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PivotIndex {
    pub value: usize,
    /// The index reached the end of the sequence; no certificate.
    pub wrapped: bool,
    /// Alignment margin(s) certifying the conclusion when not wrapped.
    pub certificate: Option<f64>,
}

/// Random index `r ~ G_ρ` of the pivoting technique on a ping-pong sequence
/// `γ_0, …, γ_{2n}` (the blocks of `grouped`): the first `j` with
/// `τ_j < P_j`, where `P_j` is `(1 − ρ) 1{γ_{2n−2j−1} A γ_{2n−2j}⋯γ_{2n}·t}`
/// divided by its conditional probability given the other blocks, and
/// `P_j = 1 − ρ` for `j ≥ n`. The optional `target` `t` is appended to the
/// suffix.
pub fn extract_r<R: Relation>(
    grouped: &GroupedWord,
    sys: &SchottkySystem,
    rel: &R,
    target: Option<&Matrix>,
    rho: f64,
    rng: &mut RngStream,
) -> PivotIndex {
    let nb = grouped.block_count();
    assert!(nb % 2 == 1, "ping-pong sequences have an odd number of blocks");
    let n = (nb - 1) / 2;
    let d = sys.dim();
    let mut suffix = target.cloned().unwrap_or_else(|| Matrix::identity(d));
    suffix = grouped.block_product(2 * n).mul(&suffix);
    let mut j = 0;
    loop {
        let tau: f64 = rng.random();
        if j >= n {
            if tau < 1.0 - rho {
                return PivotIndex { value: j, wrapped: true, certificate: None };
            }
            j += 1;
            continue;
        }
        let g = grouped.block_product(2 * n - 2 * j - 1);
        let p = if rel.related(&g, &suffix) {
            let mass: f64 =
                sys.words().iter().filter(|w| rel.related(&w.product, &suffix)).map(|w| w.weight).sum();
            ((1.0 - rho) / mass).min(1.0)
        } else {
            0.0
        };
        if tau < p {
            let margin = alignment_margin(&g, &suffix, sys.eps());
            return PivotIndex { value: j, wrapped: false, certificate: Some(margin) };
        }
        suffix = grouped.block_product(2 * n - 2 * j - 2).mul(&g).mul(&suffix);
        j += 1;
    }
}

/// Cyclic variant: `c ~ G_{2ρ}` with `γ_{2n−2c−1} A (γ_{2n−2c}⋯γ_{2c})` and
/// `(γ_{2n−2c−2}⋯γ_{2c}) A γ_{2c+1}`, products taken cyclically. Indices
/// with `4c + 3 ≥ 2n` (where the two tested odd blocks would meet) use the
/// constant `1 − 2ρ` and report a wrap.
pub fn extract_c<R: Relation>(
    grouped: &GroupedWord,
    sys: &SchottkySystem,
    rel: &R,
    rho: f64,
    rng: &mut RngStream,
) -> PivotIndex {
    let nb = grouped.block_count();
    assert!(nb % 2 == 1, "ping-pong sequences have an odd number of blocks");
    let n = (nb - 1) / 2;
    let d = sys.dim();
    let blocks: Vec<Matrix> = (0..nb).map(|k| grouped.block_product(k)).collect();
    let cyc = |from: usize, to: usize| -> Matrix {
        // γ_from ⋯ γ_{2n} γ_0 ⋯ γ_to
        let tail = Matrix::product(d, blocks[from..].iter());
        tail.mul(&Matrix::product(d, blocks[..=to].iter()))
    };
    let mut j = 0;
    loop {
        let tau: f64 = rng.random();
        if 4 * j + 3 >= 2 * n {
            if tau < 1.0 - 2.0 * rho {
                return PivotIndex { value: j, wrapped: true, certificate: None };
            }
            j += 1;
            continue;
        }
        let x = &blocks[2 * n - 2 * j - 1];
        let y = &blocks[2 * j + 1];
        let core = cyc(2 * n - 2 * j, 2 * j);
        let left = &blocks[2 * n - 2 * j - 2];
        let holds = |x: &Matrix, y: &Matrix| rel.related(x, &core) && rel.related(&left.mul(x).mul(&core), y);
        let p = if holds(x, y) {
            let mut mass = 0.0;
            for a in sys.words() {
                if !rel.related(&a.product, &core) {
                    continue;
                }
                let lhs = left.mul(&a.product).mul(&core);
                let inner: f64 =
                    sys.words().iter().filter(|b| rel.related(&lhs, &b.product)).map(|b| b.weight).sum();
                mass += a.weight * inner;
            }
            ((1.0 - 2.0 * rho) / mass).min(1.0)
        } else {
            0.0
        };
        if tau < p {
            let m1 = alignment_margin(x, &core, sys.eps());
            let m2 = alignment_margin(&left.mul(x).mul(&core), y, sys.eps());
            return PivotIndex { value: j, wrapped: false, certificate: Some(m1.min(m2)) };
        }
        j += 1;
    }
}

/// Empirical law of the pivoting indices `r` (or the cyclic `c`).
#[derive(Clone, Debug, PartialEq)]
pub struct IndexLaw {
    pub draws: usize,
    /// `counts[k]`: draws equal to `k`; the last cell pools larger values.
    pub counts: Vec<usize>,
    pub wraps: usize,
    /// Smallest alignment margin among certified draws.
    pub worst_certificate: f64,
}

impl IndexLaw {
    /// Fraction of draws with value at least `j`.
    pub fn tail(&self, j: usize) -> f64 {
        self.counts[j.min(self.counts.len() - 1)..].iter().sum::<usize>() as f64 / self.draws as f64
    }

    /// Chi-square against `G_q{k} = q^k (1 − q)`.
    pub fn fit(&self, q: f64) -> ChiSquareResult {
        let last = self.counts.len() - 1;
        let probs: Vec<f64> =
            (0..=last).map(|k| if k < last { (1.0 - q) * q.powi(k as i32) } else { q.powi(k as i32) }).collect();
        chi_square_gof(&self.counts, &probs)
    }
}

/// Draws `draws` pivoting indices, each on a fresh ping-pong sequence of
/// `letters` letters; `cyclic` selects [`extract_c`] over [`extract_r`].
pub fn sample_pivot_index<R: Relation>(
    sys: &SchottkySystem,
    rel: &R,
    draws: usize,
    letters: usize,
    cyclic: bool,
    rng: &RngStream,
) -> IndexLaw {
    let rho = sys.rho();
    let out: Vec<PivotIndex> = (0..draws as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng.derive(t);
            let grouped = ping_pong_extract(sys, letters, &mut r);
            if cyclic {
                extract_c(&grouped, sys, rel, rho, &mut r)
            } else {
                extract_r(&grouped, sys, rel, None, rho, &mut r)
            }
        })
        .collect();
    let mut law =
        IndexLaw { draws, counts: vec![0; DEPTH_CELLS + 1], wraps: 0, worst_certificate: f64::INFINITY };
    for p in out {
        law.counts[p.value.min(DEPTH_CELLS)] += 1;
        law.wraps += p.wrapped as usize;
        if let Some(m) = p.certificate {
            law.worst_certificate = law.worst_certificate.min(m);
        }
    }
    law
}

// ---------------------------------------------------------------------------
// Toy model: simple random walk on the free Coxeter group ⟨a, b, c | a² = b² = c² = 1⟩.

/// Reduced word of a group element, letters in `{0, 1, 2}`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ToyState {
    reduced: Vec<u8>,
}

impl ToyState {
    pub fn new() -> Self {
        ToyState::default()
    }

    /// Right multiplication by a generator.
    pub fn push(&mut self, letter: u8) {
        if self.reduced.last() == Some(&letter) {
            self.reduced.pop();
        } else {
            self.reduced.push(letter);
        }
    }

    pub fn len(&self) -> usize {
        self.reduced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reduced.is_empty()
    }

    pub fn reduced(&self) -> &[u8] {
        &self.reduced
    }
}

/// `t_k = min{t : |g_j| ≥ k for all j ≥ t}` over a finite path
/// `|g_0|, …, |g_n|`, for `k = 0 ..= |g_n|`.
pub fn pivotal_times(path: &[usize]) -> Vec<usize> {
    let n = path.len();
    let mut suffix_min = vec![0; n];
    let mut cur = usize::MAX;
    for t in (0..n).rev() {
        cur = cur.min(path[t]);
        suffix_min[t] = cur;
    }
    let top = *path.last().expect("non-empty path");
    let mut out = Vec::with_capacity(top + 1);
    let mut t = 0;
    for k in 0..=top {
        while suffix_min[t] < k {
            t += 1;
        }
        out.push(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyStats {
    pub n: usize,
    pub trials: usize,
    /// Histogram of `|g_n|`.
    pub length_counts: Vec<usize>,
    /// Number of trials with `g_t = 1` for each `t ≤ n`.
    pub return_counts: Vec<usize>,
    /// Mean of `|g_n|/n`.
    pub mean_speed: f64,
    pub speed_se: f64,
    /// Mean of `t_{k+1} − t_k` over the pivotal times of all trials (k ≥ 1,
    /// `t_{k+1}` strictly inside the horizon).
    pub mean_pivot_gap: f64,
    /// Pivotal times of the first few trials.
    pub pivotal_sample: Vec<Vec<usize>>,
}

/// Letter uniform on the three generators.
fn toy_letter<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    rng.random_range(0..3u8)
}

/// Simulates `trials` walks of `n` steps with exact reduced-word tracking.
pub fn toy_walk(n: usize, trials: usize, rng: &RngStream) -> ToyStats {
    assert!(n >= 1);
    const KEEP: usize = 4;
    struct Acc {
        lengths: Vec<usize>,
        returns: Vec<usize>,
        gap_sum: u64,
        gap_count: usize,
        sample: Vec<(usize, Vec<usize>)>,
    }
    let new_acc = || Acc {
        lengths: vec![0; n + 1],
        returns: vec![0; n + 1],
        gap_sum: 0,
        gap_count: 0,
        sample: Vec::new(),
    };
    let acc = (0..trials as u64)
        .into_par_iter()
        .fold(new_acc, |mut acc, t| {
            let mut r = rng.derive(t);
            let mut g = ToyState::new();
            let mut path = Vec::with_capacity(n + 1);
            path.push(0);
            acc.returns[0] += 1;
            for step in 1..=n {
                g.push(toy_letter(&mut r));
                path.push(g.len());
                if g.is_empty() {
                    acc.returns[step] += 1;
                }
            }
            acc.lengths[g.len()] += 1;
            let times = pivotal_times(&path);
            // Gaps whose right end is not forced by the horizon.
            for k in 1..times.len().saturating_sub(2) {
                acc.gap_sum += (times[k + 1] - times[k]) as u64;
                acc.gap_count += 1;
            }
            if (t as usize) < KEEP {
                acc.sample.push((t as usize, times));
            }
            acc
        })
        .reduce(new_acc, |mut a, b| {
            for (x, y) in a.lengths.iter_mut().zip(&b.lengths) {
                *x += y;
            }
            for (x, y) in a.returns.iter_mut().zip(&b.returns) {
                *x += y;
            }
            a.gap_sum += b.gap_sum;
            a.gap_count += b.gap_count;
            a.sample.extend(b.sample);
            a
        });
    // Moments from the integer histogram, so the result does not depend on
    // how rayon split the trials.
    let tf = trials as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (len, &c) in acc.lengths.iter().enumerate() {
        let x = len as f64 / n as f64;
        s1 += c as f64 * x;
        s2 += c as f64 * x * x;
    }
    let mean = s1 / tf;
    let var = (s2 / tf - mean * mean).max(0.0) * tf / (tf - 1.0).max(1.0);
    let mut sample = acc.sample;
    sample.sort_by_key(|s| s.0);
    ToyStats {
        n,
        trials,
        length_counts: acc.lengths,
        return_counts: acc.returns,
        mean_speed: mean,
        speed_se: (var / tf).sqrt(),
        mean_pivot_gap: if acc.gap_count > 0 { acc.gap_sum as f64 / acc.gap_count as f64 } else { f64::NAN },
        pivotal_sample: sample.into_iter().map(|s| s.1).collect(),
    }
}

/// State of the limit chain: the start state or a generator.
pub const TOY_START: usize = 3;

/// Transition kernel of the limit chain on `{a, b, c, s}` (indices 0..3 for
/// the generators, 3 for the start state).
pub fn toy_kernel() -> [[f64; 4]; 4] {
    let mut p = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                p[i][j] = 0.5;
            }
        }
        p[TOY_START][i] = 1.0 / 3.0;
    }
    p
}

/// Samples the decoration word `w̃` between consecutive pivotal times,
/// given the current last letter `x` (or the start state) and the next one
/// `y`: a `G_{1/3}` number of returning excursions (`G_{1/2}` from the
/// start state), then the letter `y`.
///
/// An excursion enters a child subtree through a letter different from `x`
/// and follows the walk conditioned to come back, which pops with
/// probability 2/3 and otherwise pushes one of the two admissible letters.
pub fn toy_decoration<R: Rng + ?Sized>(x: usize, y: usize, rng: &mut R) -> Vec<u8> {
    let q = if x == TOY_START { 0.5 } else { 1.0 / 3.0 };
    let excursions = geometric(q, rng);
    let mut out = Vec::new();
    let mut stack: Vec<u8> = Vec::new();
    for _ in 0..excursions {
        let first = loop {
            let l = toy_letter(rng);
            if l as usize != x {
                break l;
            }
        };
        out.push(first);
        stack.push(first);
        while let Some(&top) = stack.last() {
            if rng.random::<f64>() < 2.0 / 3.0 {
                out.push(top);
                stack.pop();
            } else {
                let l = loop {
                    let l = toy_letter(rng);
                    if l != top {
                        break l;
                    }
                };
                out.push(l);
                stack.push(l);
            }
        }
    }
    out.push(y as u8);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyExtraction {
    /// Transition counts of the limit chain.
    pub transitions: [[usize; 4]; 4],
    /// Histogram of `|g_horizon|` for the concatenated decorations.
    pub length_counts: Vec<usize>,
    /// Every decoration ended with the next chain state.
    pub last_letter_ok: bool,
    /// Every decoration reduces to the single letter of the next state.
    pub reduces_to_next: bool,
}

/// Draws the limit chain and its decorations, concatenates them until the
/// horizon, and records the chain transitions and `|g_horizon|`.
pub fn toy_markov_extract(trials: usize, horizon: usize, rng: &RngStream) -> ToyExtraction {
    assert!(horizon >= 1);
    struct Acc {
        tr: [[usize; 4]; 4],
        lengths: Vec<usize>,
        last_ok: bool,
        red_ok: bool,
    }
    let new_acc = || Acc { tr: [[0; 4]; 4], lengths: vec![0; horizon + 1], last_ok: true, red_ok: true };
    let kernel = toy_kernel();
    let acc = (0..trials as u64)
        .into_par_iter()
        .fold(new_acc, |mut acc, t| {
            let mut r = rng.derive(t);
            let mut x = TOY_START;
            let mut g = ToyState::new();
            let mut used = 0;
            while used < horizon {
                let u: f64 = r.random();
                let mut y = 0;
                let mut c = 0.0;
                for (j, &p) in kernel[x].iter().enumerate() {
                    c += p;
                    if u < c {
                        y = j;
                        break;
                    }
                }
                acc.tr[x][y] += 1;
                let w = toy_decoration(x, y, &mut r);
                acc.last_ok &= *w.last().expect("non-empty") as usize == y;
                let mut red = ToyState::new();
                for &l in &w {
                    red.push(l);
                }
                acc.red_ok &= red.reduced() == [y as u8];
                for &l in &w {
                    if used == horizon {
                        break;
                    }
                    g.push(l);
                    used += 1;
                }
                x = y;
            }
            acc.lengths[g.len()] += 1;
            acc
        })
        .reduce(new_acc, |mut a, b| {
            for i in 0..4 {
                for j in 0..4 {
                    a.tr[i][j] += b.tr[i][j];
                }
            }
            for (x, y) in a.lengths.iter_mut().zip(&b.lengths) {
                *x += y;
            }
            a.last_ok &= b.last_ok;
            a.red_ok &= b.red_ok;
            a
        });
    ToyExtraction {
        transitions: acc.tr,
        length_counts: acc.lengths,
        last_letter_ok: acc.last_ok,
        reduces_to_next: acc.red_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::AllRelated;
    use crate::measures::MeasureSpec;

    fn trivial_system() -> SchottkySystem {
        let nu = MeasureSpec::dirac(Matrix::identity(2));
        SchottkySystem::from_words(&nu, 1, 0.5, 0.1, 4.0, vec![(vec![0], 1.0)], None).unwrap()
    }

    #[test]
    fn walkthrough_trace() {
        let sys = trivial_system();
        let grouped = GroupedWord::new(vec![Matrix::identity(2)], vec![0; 11], vec![1; 11]).unwrap();
        let taus = [0.9, 0.1, 0.5, 0.95, 0.2];
        let trace = run_pivot_with_taus(&grouped, &sys, &AllRelated, &taus, J_STAB).unwrap();
        assert_eq!(
            trace.dump(),
            "0 0 backtrack 0\n1 0 advance\n2 1 advance\n3 2 backtrack 1\n4 1 advance\np 3 1 5 1 1\n"
        );
    }

    #[test]
    fn all_aligned_always_advances_below_threshold() {
        let sys = trivial_system();
        let grouped = GroupedWord::new(vec![Matrix::identity(2)], vec![0; 21], vec![1; 21]).unwrap();
        let taus = vec![0.5; 10];
        let trace = run_pivot_with_taus(&grouped, &sys, &AllRelated, &taus, J_STAB).unwrap();
        assert_eq!(trace.m, (0..=10).collect::<Vec<_>>());
    }

    #[test]
    fn pivotal_times_of_a_path() {
        assert_eq!(pivotal_times(&[0, 1, 0, 1, 2, 1, 2, 3]), vec![0, 3, 6, 7]);
    }

    #[test]
    fn first_step_never_cancels() {
        let s = toy_walk(1, 1000, &RngStream::new(1, 0));
        assert_eq!(s.length_counts, vec![0, 1000]);
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        for row in toy_kernel().iter() {
            let s: f64 = row.iter().sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn decorations_reduce_to_their_endpoint() {
        let e = toy_markov_extract(2000, 50, &RngStream::new(2, 0));
        assert!(e.last_letter_ok && e.reduces_to_next);
    }

    #[test]
    fn geometric_mean() {
        let mut r = RngStream::new(3, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| geometric(0.25, &mut r) as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.01);
    }
}
