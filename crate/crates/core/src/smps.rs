//! Probability distributions as matrix products: Birkhoff decomposition of
//! doubly stochastic steps, nonnegative factorization under the generalized
//! Kullback-Leibler divergence, extraction of stochastic matrix-product
//! form, and sequential generation programs whose correlator ends in a
//! deterministic state.
//!
//! A stochastic MPS stores p(i_0..i_{N-1}) = l^T B^[0]_{i_0} .. B^[N-1]_{i_{N-1}} r
//! with nonnegative site matrices whose per-site sums are column-stochastic.
//! Generation therefore runs right to left: starting from the distribution
//! `r`, the step at site N-1 emits that site's digit and maps the correlator
//! one bond leftward, and so on until `l` closes the chain.

use crate::caps::{checked_pow, DeskCaps};
use crate::error::{CoreError, Result};
use crate::ltm::machine::{GateStep, LocalOp, LtmSpec, MachineState};
use crate::matrix::{RMat, RVec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Column sums of stored stochastic matrices may deviate by this much.
pub const STOCHASTIC_TOL: f64 = 1e-8;

/// A normalized distribution over `dim` outcomes.
#[derive(Debug, Clone)]
pub struct ProbabilityVector {
    weights: Vec<f64>,
}

impl ProbabilityVector {
    /// Validates nonnegativity and unit mass within `tol`.
    pub fn new(weights: Vec<f64>, tol: f64) -> Result<Self> {
        if let Some(w) = weights.iter().find(|&&w| w < -tol) {
            return Err(CoreError::InvalidInput {
                context: "ProbabilityVector::new",
                detail: format!("negative weight {w}"),
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(CoreError::InvalidInput {
                context: "ProbabilityVector::new",
                detail: format!("total mass {total}"),
            });
        }
        Ok(ProbabilityVector { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

// ---------------------------------------------------------------------------
// Birkhoff decomposition

/// Writes a doubly stochastic matrix as a convex combination of permutation
/// matrices. Permutations are returned as images: `perm[j]` is the row that
/// column `j` maps to. Each round subtracts the lexicographically smallest
/// permutation of maximal bottleneck weight, so the expansion has at most
/// (n-1)^2 + 1 terms and is deterministic.
pub fn birkhoff_decompose(s: &RMat, tol: f64) -> Result<Vec<(f64, Vec<usize>)>> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(CoreError::ShapeMismatch {
            context: "birkhoff_decompose",
            expected: "square matrix".into(),
            got: format!("{}x{}", s.nrows(), s.ncols()),
        });
    }
    if n > 8 {
        return Err(CoreError::CapExceeded {
            context: "birkhoff_decompose",
            needed: n as u128,
            cap: 8,
        });
    }
    if s.iter().any(|&x| x < -tol) {
        return Err(CoreError::InvalidInput {
            context: "birkhoff_decompose",
            detail: "negative entry".into(),
        });
    }
    for j in 0..n {
        let col: f64 = s.column(j).sum();
        let row: f64 = s.row(j).sum();
        if (col - 1.0).abs() > tol || (row - 1.0).abs() > tol {
            return Err(CoreError::InvalidInput {
                context: "birkhoff_decompose",
                detail: format!("line {j} sums to row {row}, column {col}"),
            });
        }
    }
    let perms = permutations_lex(n);
    let mut residual = s.clone();
    let mut terms: Vec<(f64, Vec<usize>)> = Vec::new();
    let round_floor = tol.max(1e-14);
    loop {
        let mut best: Option<(f64, &Vec<usize>)> = None;
        for perm in &perms {
            let w = (0..n).map(|j| residual[(perm[j], j)]).fold(f64::INFINITY, f64::min);
            if w > best.map_or(0.0, |(bw, _)| bw) {
                best = Some((w, perm));
            }
        }
        let Some((w, perm)) = best else { break };
        if w <= round_floor {
            break;
        }
        for j in 0..n {
            residual[(perm[j], j)] -= w;
        }
        terms.push((w, perm.clone()));
    }
    let total: f64 = terms.iter().map(|(w, _)| *w).sum();
    if total <= 0.0 {
        return Err(CoreError::Internal {
            detail: "no permutation support found".into(),
        });
    }
    for (w, _) in terms.iter_mut() {
        *w /= total;
    }
    Ok(terms)
}

/// All permutations of 0..n in lexicographic order, as image vectors.
fn permutations_lex(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, current: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for v in 0..n {
            if !used[v] {
                used[v] = true;
                current.push(v);
                rec(n, current, used, out);
                current.pop();
                used[v] = false;
            }
        }
    }
    rec(n, &mut current, &mut used, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Nonnegative factorization under generalized KL divergence

/// Factorization A ~ P diag(d) Q^T with P and Q column-stochastic and the
/// diagonal carrying all mass: sum(d) = sum(A).
#[derive(Debug, Clone)]
pub struct NmfResult {
    pub p: RMat,
    pub d: RVec,
    pub qt: RMat,
    pub k: usize,
    pub divergence: f64,
    pub iterations: usize,
    /// Divergence after each update round, non-increasing.
    pub trace: Vec<f64>,
}

impl NmfResult {
    /// Reassembles P diag(d) Q^T.
    pub fn reconstruct(&self) -> RMat {
        let mut dq = self.qt.clone();
        for a in 0..self.k {
            let scale = self.d[a];
            for j in 0..dq.ncols() {
                dq[(a, j)] *= scale;
            }
        }
        &self.p * dq
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NmfOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        NmfOptions { max_iter: 2000, tol: 0.0, seed: 7 }
    }
}

const NMF_EPS: f64 = 1e-12;

fn generalized_kl(a: &RMat, x: &RMat) -> f64 {
    let mut div = 0.0;
    for (av, xv) in a.iter().zip(x.iter()) {
        let x = xv.max(NMF_EPS);
        if *av > 0.0 {
            div += av * (av / x).ln() - av + x;
        } else {
            div += x;
        }
    }
    div
}

/// Multiplicative-update factorization minimizing the generalized KL
/// divergence D(A || W H); the divergence never increases between rounds.
/// The result is normalized into column-stochastic P, Q with the scale on
/// the diagonal; the final uniform rescale to match total mass is itself a
/// divergence-non-increasing step and is included in the trace.
pub fn nmf_kl(a: &RMat, k: usize, opts: NmfOptions) -> Result<NmfResult> {
    let (m, n) = a.shape();
    if a.iter().any(|&x| x < 0.0) {
        return Err(CoreError::InvalidInput {
            context: "nmf_kl",
            detail: "negative entry".into(),
        });
    }
    if k == 0 || k > m.min(n) {
        return Err(CoreError::InvalidInput {
            context: "nmf_kl",
            detail: format!("rank {k} outside 1..={}", m.min(n)),
        });
    }
    let total: f64 = a.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::InvalidInput {
            context: "nmf_kl",
            detail: "matrix has no mass".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = (total / (m * n * k) as f64).sqrt();
    let mut w = RMat::from_fn(m, k, |_, _| scale * (0.25 + rng.random_range(0.0..1.0)));
    let mut h = RMat::from_fn(k, n, |_, _| scale * (0.25 + rng.random_range(0.0..1.0)));
    let mut trace = Vec::new();
    let mut last = generalized_kl(a, &(&w * &h));
    trace.push(last);
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        // H update, then W update: each is the Lee-Seung KL step.
        let wh = &w * &h;
        for aa in 0..k {
            let wsum: f64 = w.column(aa).sum().max(NMF_EPS);
            for j in 0..n {
                let mut num = 0.0;
                for i in 0..m {
                    num += w[(i, aa)] * a[(i, j)] / wh[(i, j)].max(NMF_EPS);
                }
                h[(aa, j)] *= num / wsum;
            }
        }
        let wh = &w * &h;
        for aa in 0..k {
            let hsum: f64 = h.row(aa).sum().max(NMF_EPS);
            for i in 0..m {
                let mut num = 0.0;
                for j in 0..n {
                    num += h[(aa, j)] * a[(i, j)] / wh[(i, j)].max(NMF_EPS);
                }
                w[(i, aa)] *= num / hsum;
            }
        }
        iterations += 1;
        let div = generalized_kl(a, &(&w * &h));
        trace.push(div);
        let done = (last - div).abs() < opts.tol;
        last = div;
        if done {
            break;
        }
    }
    // Uniform rescale to exact total mass; optimal for KL in the scale.
    let mass: f64 = (&w * &h).iter().sum();
    if mass > 0.0 {
        let c = (total / mass).sqrt();
        w *= c;
        h *= c;
    }
    last = generalized_kl(a, &(&w * &h));
    trace.push(last);
    // Absorb column and row scales into the diagonal.
    let mut p = w;
    let mut qt = h;
    let mut d = RVec::zeros(k);
    for aa in 0..k {
        let wsum: f64 = p.column(aa).sum();
        let hsum: f64 = qt.row(aa).sum();
        d[aa] = wsum * hsum;
        if wsum > 0.0 {
            for i in 0..m {
                p[(i, aa)] /= wsum;
            }
        } else {
            // Dead component: park it on the first row, mass zero anyway.
            p[(0, aa)] = 1.0;
        }
        if hsum > 0.0 {
            for j in 0..n {
                qt[(aa, j)] /= hsum;
            }
        } else {
            qt[(aa, 0)] = 1.0;
        }
    }
    Ok(NmfResult { p, d, qt, k, divergence: last, iterations, trace })
}

/// Exact factorization used when the inner rank may equal the smaller side:
/// normalize the columns (or rows) and put the removed sums on the diagonal.
fn exact_factorization(a: &RMat) -> NmfResult {
    let (m, n) = a.shape();
    let total: f64 = a.iter().sum();
    if n <= m {
        let mut p = a.clone();
        let mut d = RVec::zeros(n);
        for j in 0..n {
            let s: f64 = p.column(j).sum();
            d[j] = s;
            if s > 0.0 {
                for i in 0..m {
                    p[(i, j)] /= s;
                }
            } else {
                p[(0, j)] = 1.0;
            }
        }
        NmfResult {
            p,
            d,
            qt: RMat::identity(n, n),
            k: n,
            divergence: 0.0,
            iterations: 0,
            trace: vec![0.0],
        }
    } else {
        let mut qt = a.clone();
        let mut d = RVec::zeros(m);
        for i in 0..m {
            let s: f64 = qt.row(i).sum();
            d[i] = s;
            if s > 0.0 {
                for j in 0..n {
                    qt[(i, j)] /= s;
                }
            } else {
                qt[(i, 0)] = 1.0;
            }
        }
        let _ = total;
        NmfResult {
            p: RMat::identity(m, m),
            d,
            qt,
            k: m,
            divergence: 0.0,
            iterations: 0,
            trace: vec![0.0],
        }
    }
}

// ---------------------------------------------------------------------------
// Stochastic matrix-product states

/// A probability vector in matrix-product form with nonnegative data.
#[derive(Debug, Clone)]
pub struct StochasticMps {
    d: usize,
    /// sites[k][i] has shape r_k x r_{k+1}.
    sites: Vec<Vec<RMat>>,
    left: RVec,
    right: RVec,
}

impl StochasticMps {
    pub fn new(d: usize, sites: Vec<Vec<RMat>>, left: RVec, right: RVec) -> Result<Self> {
        if d < 2 || sites.is_empty() {
            return Err(CoreError::InvalidInput {
                context: "StochasticMps::new",
                detail: "need d >= 2 and at least one site".into(),
            });
        }
        let mut prev = left.len();
        for (k, site) in sites.iter().enumerate() {
            if site.len() != d {
                return Err(CoreError::ShapeMismatch {
                    context: "StochasticMps::new",
                    expected: format!("{d} matrices at site {k}"),
                    got: site.len().to_string(),
                });
            }
            let (rows, cols) = site[0].shape();
            if rows != prev {
                return Err(CoreError::ShapeMismatch {
                    context: "StochasticMps::new",
                    expected: format!("site {k} with {prev} rows"),
                    got: rows.to_string(),
                });
            }
            for b in site {
                if b.shape() != (rows, cols) {
                    return Err(CoreError::ShapeMismatch {
                        context: "StochasticMps::new",
                        expected: format!("{rows}x{cols}"),
                        got: format!("{}x{}", b.nrows(), b.ncols()),
                    });
                }
                if b.iter().any(|&x| x < -1e-12) {
                    return Err(CoreError::InvalidInput {
                        context: "StochasticMps::new",
                        detail: format!("negative entry at site {k}"),
                    });
                }
            }
            prev = cols;
        }
        if right.len() != prev {
            return Err(CoreError::ShapeMismatch {
                context: "StochasticMps::new",
                expected: format!("right boundary of length {prev}"),
                got: right.len().to_string(),
            });
        }
        if left.iter().any(|&x| x < -1e-12) || right.iter().any(|&x| x < -1e-12) {
            return Err(CoreError::InvalidInput {
                context: "StochasticMps::new",
                detail: "negative boundary entry".into(),
            });
        }
        Ok(StochasticMps { d, sites, left, right })
    }

    pub fn physical_dim(&self) -> usize {
        self.d
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site(&self, k: usize) -> &[RMat] {
        &self.sites[k]
    }

    pub fn left(&self) -> &RVec {
        &self.left
    }

    pub fn right(&self) -> &RVec {
        &self.right
    }

    /// Bond dimensions r_0 ..= r_N.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.left.len()];
        for site in &self.sites {
            dims.push(site[0].ncols());
        }
        dims
    }

    /// Largest deviation of any per-site sum from column-stochasticity.
    pub fn stochastic_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for site in &self.sites {
            let cols = site[0].ncols();
            for j in 0..cols {
                let total: f64 = site.iter().map(|b| b.column(j).sum()).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SmpsOptions {
    /// Cap on the inner rank at each cut; `None` keeps the exact rank
    /// min(rows, cols), which factorizes without iteration.
    pub max_rank: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SmpsOptions {
    fn default() -> Self {
        SmpsOptions { max_rank: None, max_iter: 4000, tol: 0.0, seed: 7 }
    }
}

/// Factorizes a distribution into stochastic matrix-product form by
/// sweeping nonnegative factorizations across the cuts, left to right.
pub fn prob_to_smps(
    p: &ProbabilityVector,
    d: usize,
    n_sites: usize,
    opts: SmpsOptions,
) -> Result<StochasticMps> {
    let dim = checked_pow(d, n_sites);
    if dim != p.dim() as u128 {
        return Err(CoreError::ShapeMismatch {
            context: "prob_to_smps",
            expected: format!("{dim} weights"),
            got: p.dim().to_string(),
        });
    }
    let mut sites: Vec<Vec<RMat>> = Vec::with_capacity(n_sites);
    // `carry` holds diag(d) Q^T from the previous cut: r_k rows, one column
    // per remaining configuration.
    let mut carry = RMat::from_fn(1, p.dim(), |_, j| p.weights()[j]);
    for k in 0..n_sites {
        let r_prev = carry.nrows();
        let cols_rest = carry.ncols() / d;
        // Rows (lambda, i_k), columns the remaining digits.
        let a = RMat::from_fn(r_prev * d, cols_rest, |row, col| {
            let (lambda, i) = (row / d, row % d);
            carry[(lambda, i * cols_rest + col)]
        });
        let full = (r_prev * d).min(cols_rest);
        let want = opts.max_rank.map_or(full, |r| r.min(full));
        let result = if want >= full {
            exact_factorization(&a)
        } else {
            nmf_kl(&a, want, NmfOptions { max_iter: opts.max_iter, tol: opts.tol, seed: opts.seed })?
        };
        let rank = result.k;
        let mut site = vec![RMat::zeros(r_prev, rank); d];
        for i in 0..d {
            for lambda in 0..r_prev {
                for mu in 0..rank {
                    site[i][(lambda, mu)] = result.p[(lambda * d + i, mu)];
                }
            }
        }
        sites.push(site);
        carry = RMat::from_fn(rank, cols_rest, |mu, col| result.d[mu] * result.qt[(mu, col)]);
        let _ = k;
    }
    debug_assert_eq!(carry.ncols(), 1);
    // The final carry column is the right boundary mass (sums to 1).
    let right = RVec::from_fn(carry.nrows(), |mu, _| carry[(mu, 0)]);
    let left = RVec::from_element(1, 1.0);
    StochasticMps::new(d, sites, left, right)
}

/// Contracts the matrix product back into a dense distribution.
pub fn smps_to_prob(s: &StochasticMps, caps: &DeskCaps) -> Result<ProbabilityVector> {
    let dim = checked_pow(s.d, s.n_sites());
    caps.check_statevector(dim, "smps_to_prob")?;
    let dim = dim as usize;
    let n = s.n_sites();
    let mut weights = vec![0.0f64; dim];
    for (idx, slot) in weights.iter_mut().enumerate() {
        let mut digits = vec![0usize; n];
        let mut rem = idx;
        for k in (0..n).rev() {
            digits[k] = rem % s.d;
            rem /= s.d;
        }
        let mut v = s.right.clone();
        for k in (0..n).rev() {
            v = &s.sites[k][digits[k]] * v;
        }
        *slot = s.left.iter().zip(v.iter()).map(|(l, x)| l * x).sum();
    }
    ProbabilityVector::new(weights, 1e-6)
}

// ---------------------------------------------------------------------------
// Stochastic sequential generation

/// Sequential generation program: square column-stochastic joint maps on
/// (fresh digit x correlator), applied in the listed order starting from
/// `init_correlator`. Joint index is digit * chi + correlator. The step at
/// position k emits tape site N-1-k, so the physically last site is
/// generated first and the correlator ends decoupled in state 0.
#[derive(Debug, Clone)]
pub struct StochasticSeqProgram {
    pub d: usize,
    pub chi: usize,
    pub steps: Vec<RMat>,
    pub init_correlator: RVec,
}

impl StochasticSeqProgram {
    pub fn n_sites(&self) -> usize {
        self.steps.len()
    }
}

/// Rewrites a stochastic MPS as a sequential generation program whose
/// correlator finishes in a point mass, by exact column normalization: the
/// left boundary folds into the physically first site, each column's mass
/// moves one bond rightward, and the leftover diagonal rescales the right
/// boundary into the initial correlator distribution.
pub fn decouple_stochastic(s: &StochasticMps) -> Result<StochasticSeqProgram> {
    let d = s.d;
    let n = s.n_sites();
    let bonds = s.bond_dims();
    let chi = bonds.iter().copied().max().expect("nonempty").max(1);
    // Sweep left to right, absorbing the carry diagonal.
    let mut normalized: Vec<Vec<RMat>> = Vec::with_capacity(n);
    let mut carry: Vec<f64> = s.left.iter().copied().collect();
    for k in 0..n {
        let rows = bonds[k];
        let cols = bonds[k + 1];
        // Weighted stack V[(i, lambda), mu] = carry[lambda] B_i[lambda, mu].
        let mut col_mass = vec![0.0f64; cols];
        for mu in 0..cols {
            for i in 0..d {
                for lambda in 0..rows {
                    col_mass[mu] += carry[lambda] * s.sites[k][i][(lambda, mu)];
                }
            }
        }
        let mut site = vec![RMat::zeros(rows, cols); d];
        for (i, b) in s.sites[k].iter().enumerate() {
            for mu in 0..cols {
                if col_mass[mu] > 0.0 {
                    for lambda in 0..rows {
                        site[i][(lambda, mu)] = carry[lambda] * b[(lambda, mu)] / col_mass[mu];
                    }
                } else if i == 0 && rows > 0 {
                    // Dead column: route to digit 0, correlator 0.
                    site[i][(0, mu)] = 1.0;
                }
            }
        }
        normalized.push(site);
        carry = col_mass;
    }
    // Initial correlator distribution: leftover mass against the right
    // boundary; the chain's total mass makes it normalized.
    let mut init = RVec::zeros(chi);
    let mut total = 0.0;
    for mu in 0..bonds[n] {
        let w = carry[mu] * s.right[mu];
        init[mu] = w;
        total += w;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(CoreError::FactorizationFailure {
            site: n,
            detail: format!("chain mass {total} is not 1"),
        });
    }
    for v in init.iter_mut() {
        *v /= total;
    }
    // Embed each normalized site into a square joint map; execution order
    // is site N-1 first. Columns with a fresh digit j != 0 never receive
    // probability and simply repeat the first block-column.
    let mut steps = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let rows = bonds[k];
        let cols = bonds[k + 1];
        let mut q = RMat::zeros(d * chi, d * chi);
        for j in 0..d {
            for c in 0..chi {
                let col = j * chi + c;
                if c < cols {
                    for i in 0..d {
                        for lambda in 0..rows {
                            q[(i * chi + lambda, col)] = normalized[k][i][(lambda, c)];
                        }
                    }
                } else {
                    q[(0, col)] = 1.0;
                }
            }
        }
        steps.push(q);
    }
    Ok(StochasticSeqProgram { d, chi, steps, init_correlator: init })
}

/// Exactly propagates a generation program: returns the joint tape
/// distribution (site 0 slowest) and the final correlator marginal.
pub fn propagate_program(
    prog: &StochasticSeqProgram,
    caps: &DeskCaps,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = prog.n_sites();
    let tape_dim = checked_pow(prog.d, n);
    caps.check_statevector(tape_dim.saturating_mul(prog.chi as u128), "propagate_program")?;
    let tape_dim = tape_dim as usize;
    let chi = prog.chi;
    // dist[t * chi + c]; step k emits the digit with stride d^k.
    let mut dist = vec![0.0f64; chi];
    for c in 0..chi {
        dist[c] = prog.init_correlator[c];
    }
    let mut emitted = 1usize;
    let mut stride = 1usize;
    for q in &prog.steps {
        let mut next = vec![0.0f64; emitted * prog.d * chi];
        for t in 0..emitted {
            for c in 0..chi {
                let w = dist[t * chi + c];
                if w == 0.0 {
                    continue;
                }
                for i in 0..prog.d {
                    for lambda in 0..chi {
                        let flow = q[(i * chi + lambda, c)];
                        if flow != 0.0 {
                            next[(t + i * stride) * chi + lambda] += w * flow;
                        }
                    }
                }
            }
        }
        dist = next;
        emitted *= prog.d;
        stride *= prog.d;
    }
    debug_assert_eq!(emitted, tape_dim);
    let mut tape = vec![0.0f64; tape_dim];
    let mut correlator = vec![0.0f64; chi];
    for t in 0..tape_dim {
        for c in 0..chi {
            let w = dist[t * chi + c];
            tape[t] += w;
            correlator[c] += w;
        }
    }
    Ok((tape, correlator))
}

/// Draws `shots` tapes by ancestral sampling through the program and
/// returns outcome counts indexed like the exact propagation.
pub fn sample_sequential(
    prog: &StochasticSeqProgram,
    shots: usize,
    seed: u64,
    caps: &DeskCaps,
) -> Result<Vec<u64>> {
    if shots == 0 {
        return Err(CoreError::InvalidInput {
            context: "sample_sequential",
            detail: "need at least one shot".into(),
        });
    }
    let n = prog.n_sites();
    let tape_dim = checked_pow(prog.d, n);
    caps.check_statevector(tape_dim, "sample_sequential")?;
    let mut counts = vec![0u64; tape_dim as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chi = prog.chi;
    for _ in 0..shots {
        let mut c = sample_index(prog.init_correlator.iter().copied(), &mut rng);
        let mut tape = 0usize;
        let mut stride = 1usize;
        for q in &prog.steps {
            let col = q.column(c);
            let pick = sample_index(col.iter().copied(), &mut rng);
            tape += (pick / chi) * stride;
            c = pick % chi;
            stride *= prog.d;
        }
        counts[tape] += 1;
    }
    Ok(counts)
}

fn sample_index<R: Rng + ?Sized>(weights: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let collected: Vec<f64> = weights.collect();
    let total: f64 = collected.iter().sum();
    let mut draw = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
    for (idx, &w) in collected.iter().enumerate() {
        if draw < w {
            return idx;
        }
        draw -= w;
    }
    collected.len() - 1
}

// ---------------------------------------------------------------------------
// Probabilistic tape machines

/// How to evaluate a probabilistic machine run.
#[derive(Debug, Clone, Copy)]
pub enum LptmMode {
    /// Propagate the full joint distribution.
    Exact,
    /// Decompose every stochastic step into permutations and run seeded
    /// deterministic trajectories.
    Sample { shots: usize, seed: u64 },
}

/// Runs a probabilistic machine and returns the tape marginal, summing out
/// processor (and, implicitly, the deterministic head position).
pub fn lptm_run(
    spec: &LtmSpec,
    program: &[GateStep],
    tape: &[usize],
    mode: LptmMode,
    caps: &DeskCaps,
) -> Result<Vec<f64>> {
    let tape_dim = checked_pow(spec.site_dim, spec.tape_len);
    caps.check_statevector(tape_dim, "lptm_run")?;
    let tape_dim = tape_dim as usize;
    match mode {
        LptmMode::Exact => {
            let trace = crate::ltm::machine::run(spec, program, tape, program.len() + 1, caps)?;
            if !trace.halted {
                return Err(CoreError::MachineFault {
                    detail: "program did not halt within its own length".into(),
                });
            }
            let mut out = vec![0.0f64; tape_dim];
            match trace.config.state {
                MachineState::Classical { tape, .. } => {
                    let mut idx = 0usize;
                    for &digit in &tape {
                        idx = idx * spec.site_dim + digit;
                    }
                    out[idx] = 1.0;
                }
                MachineState::Probabilistic { joint } => {
                    for (idx, w) in joint.iter().enumerate() {
                        out[idx % tape_dim] += w;
                    }
                }
                _ => {
                    return Err(CoreError::MachineFault {
                        detail: "probabilistic run produced a quantum state".into(),
                    });
                }
            }
            Ok(out)
        }
        LptmMode::Sample { shots, seed } => {
            if shots == 0 {
                return Err(CoreError::InvalidInput {
                    context: "lptm_run",
                    detail: "need at least one shot".into(),
                });
            }
            // Decompose each stochastic gate once; every trajectory then
            // runs as a deterministic permutation machine.
            let mut tables: Vec<Option<Vec<(f64, Vec<usize>)>>> = Vec::new();
            for op in &spec.gates {
                tables.push(match op {
                    LocalOp::Permutation(_) => None,
                    LocalOp::Stochastic(m) => Some(birkhoff_decompose(m, 1e-9)?),
                    _ => {
                        return Err(CoreError::InvalidInput {
                            context: "lptm_run",
                            detail: "sampling needs classical or stochastic gates only".into(),
                        });
                    }
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = vec![0.0f64; tape_dim];
            for _ in 0..shots {
                let mut cells = tape.to_vec();
                let mut proc = spec.start_proc;
                let mut head = spec.head_start;
                let mut ctrl = 0usize;
                let mut steps = 0usize;
                while ctrl < program.len() {
                    if steps > program.len() {
                        return Err(CoreError::MachineFault {
                            detail: "trajectory did not halt".into(),
                        });
                    }
                    let st = &program[ctrl];
                    if st.site != head {
                        return Err(CoreError::MachineFault {
                            detail: format!("step {ctrl} addresses site {} off-head", st.site),
                        });
                    }
                    let image: &Vec<usize> = match (&spec.gates[st.gate], &tables[st.gate]) {
                        (LocalOp::Permutation(image), _) => image,
                        (_, Some(terms)) => {
                            let draw: f64 = rng.random_range(0.0..1.0);
                            let mut acc = 0.0;
                            let mut chosen = &terms[terms.len() - 1].1;
                            for (w, perm) in terms {
                                acc += w;
                                if draw < acc {
                                    chosen = perm;
                                    break;
                                }
                            }
                            chosen
                        }
                        _ => unreachable!("validated above"),
                    };
                    let local = proc * spec.site_dim + cells[head];
                    let to = image[local];
                    proc = to / spec.site_dim;
                    cells[head] = to % spec.site_dim;
                    let next = head as i64 + st.shift as i64;
                    if next < 0 || next >= spec.tape_len as i64 {
                        return Err(CoreError::MachineFault {
                            detail: "head left the tape".into(),
                        });
                    }
                    head = next as usize;
                    ctrl = st.next.unwrap_or(ctrl + 1);
                    steps += 1;
                }
                let mut idx = 0usize;
                for &digit in &cells {
                    idx = idx * spec.site_dim + digit;
                }
                counts[idx] += 1.0;
            }
            for c in counts.iter_mut() {
                *c /= shots as f64;
            }
            Ok(counts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltm::machine::{identity_perm, MachineKind};
    use crate::matrix::rmat_from_rows as from_rows;

    fn caps() -> DeskCaps {
        DeskCaps::default()
    }

    fn l1(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    }

    fn sinkhorn(mut m: RMat, rounds: usize) -> RMat {
        for _ in 0..rounds {
            for i in 0..m.nrows() {
                let s: f64 = m.row(i).sum();
                for j in 0..m.ncols() {
                    m[(i, j)] /= s;
                }
            }
            for j in 0..m.ncols() {
                let s: f64 = m.column(j).sum();
                for i in 0..m.nrows() {
                    m[(i, j)] /= s;
                }
            }
        }
        m
    }

    fn rebuild(n: usize, terms: &[(f64, Vec<usize>)]) -> RMat {
        let mut out = RMat::zeros(n, n);
        for (w, perm) in terms {
            for j in 0..n {
                out[(perm[j], j)] += w;
            }
        }
        out
    }

    #[test]
    fn birkhoff_returns_a_permutation_unchanged() {
        let m = from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let terms = birkhoff_decompose(&m, 1e-12).unwrap();
        assert_eq!(terms.len(), 1);
        assert!((terms[0].0 - 1.0).abs() <= 1e-12);
        assert_eq!(terms[0].1, vec![2, 0, 1]);
    }

    #[test]
    fn birkhoff_splits_the_even_mixture() {
        let m = from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let terms = birkhoff_decompose(&m, 1e-12).unwrap();
        assert_eq!(terms.len(), 2);
        // Lexicographic tie-break puts the identity first.
        assert_eq!(terms[0].1, vec![0, 1]);
        assert_eq!(terms[1].1, vec![1, 0]);
        assert!((terms[0].0 - 0.5).abs() <= 1e-12);
        assert!((terms[1].0 - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn birkhoff_reconstructs_sinkhorn_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let raw = RMat::from_fn(4, 4, |_, _| rng.random_range(0.05..1.0));
            let ds = sinkhorn(raw, 200);
            let terms = birkhoff_decompose(&ds, 1e-9).unwrap();
            assert!(terms.len() <= 10, "needed {} terms", terms.len());
            let err = (rebuild(4, &terms) - &ds).abs().max();
            assert!(err <= 1e-8, "reconstruction error {err}");
        }
    }

    #[test]
    fn birkhoff_rejects_unbalanced_matrices() {
        let m = from_rows(&[&[0.9, 0.1], &[0.5, 0.5]]);
        assert!(birkhoff_decompose(&m, 1e-9).is_err());
    }

    #[test]
    fn nmf_recovers_rank_one_products() {
        let row = [0.2, 0.3, 0.5];
        let col = [0.6, 0.4];
        let a = RMat::from_fn(2, 3, |i, j| col[i] * row[j]);
        let result = nmf_kl(&a, 1, NmfOptions::default()).unwrap();
        assert!(result.divergence <= 1e-10, "divergence {}", result.divergence);
        assert!((result.d.sum() - 1.0).abs() <= 1e-8);
        let err = (result.reconstruct() - &a).abs().max();
        assert!(err <= 1e-6);
    }

    #[test]
    fn nmf_recovers_the_diagonal_pair() {
        let a = from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]);
        let result = nmf_kl(&a, 2, NmfOptions { max_iter: 4000, ..NmfOptions::default() }).unwrap();
        assert!(result.divergence <= 1e-9, "divergence {}", result.divergence);
        assert!((result.d.sum() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn nmf_divergence_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let a = RMat::from_fn(6, 8, |_, _| rng.random_range(0.0..1.0));
        let result =
            nmf_kl(&a, 4, NmfOptions { max_iter: 300, tol: 0.0, seed: 11 }).unwrap();
        for pair in result.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10 * pair[0].abs().max(1.0));
        }
        assert!((result.d.sum() - a.iter().sum::<f64>()).abs() <= 1e-8);
    }

    #[test]
    fn nmf_rejects_bad_inputs() {
        let a = from_rows(&[&[0.5, -0.1], &[0.2, 0.4]]);
        assert!(nmf_kl(&a, 1, NmfOptions::default()).is_err());
        let b = from_rows(&[&[0.5, 0.1], &[0.2, 0.4]]);
        assert!(nmf_kl(&b, 0, NmfOptions::default()).is_err());
        assert!(nmf_kl(&b, 3, NmfOptions::default()).is_err());
    }

    fn product_distribution(biases: &[f64]) -> ProbabilityVector {
        let n = biases.len();
        let dim = 1usize << n;
        let mut w = vec![0.0f64; dim];
        for (idx, slot) in w.iter_mut().enumerate() {
            let mut p = 1.0;
            for (k, &bias) in biases.iter().enumerate() {
                let bit = (idx >> (n - 1 - k)) & 1;
                p *= if bit == 1 { bias } else { 1.0 - bias };
            }
            *slot = p;
        }
        ProbabilityVector::new(w, 1e-12).unwrap()
    }

    fn correlated_pair(n: usize) -> ProbabilityVector {
        let dim = 1usize << n;
        let mut w = vec![0.0f64; dim];
        w[0] = 0.5;
        w[dim - 1] = 0.5;
        ProbabilityVector::new(w, 1e-12).unwrap()
    }

    #[test]
    fn product_distributions_round_trip_exactly() {
        let p = product_distribution(&[0.3, 0.7, 0.5, 0.2]);
        let smps = prob_to_smps(&p, 2, 4, SmpsOptions::default()).unwrap();
        assert!(smps.stochastic_deviation() <= STOCHASTIC_TOL);
        let back = smps_to_prob(&smps, &caps()).unwrap();
        assert!(l1(back.weights(), p.weights()) <= 1e-12);

        // Forcing unit inner rank reproduces the product with trivial bonds.
        let narrow = prob_to_smps(
            &p,
            2,
            4,
            SmpsOptions { max_rank: Some(1), ..SmpsOptions::default() },
        )
        .unwrap();
        assert!(narrow.bond_dims().iter().all(|&r| r == 1));
        let back = smps_to_prob(&narrow, &caps()).unwrap();
        assert!(l1(back.weights(), p.weights()) <= 1e-8);
    }

    #[test]
    fn correlated_pair_round_trips_with_two_bonds() {
        let p = correlated_pair(3);
        let smps = prob_to_smps(
            &p,
            2,
            3,
            SmpsOptions { max_rank: Some(2), ..SmpsOptions::default() },
        )
        .unwrap();
        assert!(smps.bond_dims().iter().all(|&r| r <= 2));
        let back = smps_to_prob(&smps, &caps()).unwrap();
        assert!(l1(back.weights(), p.weights()) <= 1e-8);
    }

    #[test]
    fn random_distribution_round_trips_at_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut w: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        let p = ProbabilityVector::new(w, 1e-12).unwrap();
        let smps = prob_to_smps(&p, 2, 3, SmpsOptions::default()).unwrap();
        assert!(smps.stochastic_deviation() <= STOCHASTIC_TOL);
        let back = smps_to_prob(&smps, &caps()).unwrap();
        assert!(l1(back.weights(), p.weights()) <= 1e-10);
    }

    #[test]
    fn decoupled_program_generates_the_distribution() {
        for p in [correlated_pair(2), product_distribution(&[0.25, 0.8])] {
            let smps = prob_to_smps(&p, 2, 2, SmpsOptions::default()).unwrap();
            let prog = decouple_stochastic(&smps).unwrap();
            // Every step is column-stochastic with the generation map in
            // its first block-column.
            for q in &prog.steps {
                for j in 0..q.ncols() {
                    assert!((q.column(j).sum() - 1.0).abs() <= 1e-10);
                }
            }
            let (tape, correlator) = propagate_program(&prog, &caps()).unwrap();
            assert!(l1(&tape, p.weights()) <= 1e-10);
            let peak = correlator.iter().cloned().fold(0.0, f64::max);
            assert!(peak >= 1.0 - 1e-8, "correlator marginal peak {peak}");
        }
    }

    #[test]
    fn decoupled_random_three_bits_propagates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut w: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        let p = ProbabilityVector::new(w, 1e-12).unwrap();
        let smps = prob_to_smps(&p, 2, 3, SmpsOptions::default()).unwrap();
        let prog = decouple_stochastic(&smps).unwrap();
        let (tape, correlator) = propagate_program(&prog, &caps()).unwrap();
        assert!(l1(&tape, p.weights()) <= 1e-8);
        let peak = correlator.iter().cloned().fold(0.0, f64::max);
        assert!(peak >= 1.0 - 1e-8);
    }

    #[test]
    fn sampling_a_point_mass_always_returns_it() {
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        let p = ProbabilityVector::new(w, 1e-12).unwrap();
        let smps = prob_to_smps(&p, 2, 2, SmpsOptions::default()).unwrap();
        let prog = decouple_stochastic(&smps).unwrap();
        let counts = sample_sequential(&prog, 200, 5, &caps()).unwrap();
        assert_eq!(counts[2], 200);
    }

    #[test]
    fn sampling_converges_to_the_marginal() {
        let p = correlated_pair(2);
        let smps = prob_to_smps(&p, 2, 2, SmpsOptions::default()).unwrap();
        let prog = decouple_stochastic(&smps).unwrap();
        let shots = 100_000usize;
        let counts = sample_sequential(&prog, shots, 97, &caps()).unwrap();
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / shots as f64).collect();
        let tv: f64 = 0.5 * l1(&freq, p.weights());
        assert!(tv <= 0.01, "total variation {tv}");
    }

    fn coin_spec() -> (LtmSpec, Vec<GateStep>) {
        // One bit, trivial processor; a single fair-coin step.
        let coin = from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let spec = LtmSpec {
            kind: MachineKind::Probabilistic,
            proc_dim: 1,
            site_dim: 2,
            tape_len: 1,
            gates: vec![LocalOp::Stochastic(coin), identity_perm(2)],
            head_start: 0,
            start_proc: 0,
            final_proc: vec![],
            input_sites: vec![0],
            output_sites: vec![0],
        };
        (spec, vec![GateStep::new(0, 0, 0)])
    }

    #[test]
    fn deterministic_program_is_a_point_mass() {
        let (mut spec, _) = coin_spec();
        spec.gates = vec![LocalOp::Permutation(vec![1, 0])];
        let program = vec![GateStep::new(0, 0, 0)];
        let out = lptm_run(&spec, &program, &[0], LptmMode::Exact, &caps()).unwrap();
        assert_eq!(out, vec![0.0, 1.0]);
        let sampled =
            lptm_run(&spec, &program, &[0], LptmMode::Sample { shots: 64, seed: 3 }, &caps())
                .unwrap();
        assert_eq!(sampled, vec![0.0, 1.0]);
    }

    #[test]
    fn fair_coin_splits_evenly() {
        let (spec, program) = coin_spec();
        let out = lptm_run(&spec, &program, &[0], LptmMode::Exact, &caps()).unwrap();
        assert!(l1(&out, &[0.5, 0.5]) <= 1e-12);
        let sampled = lptm_run(
            &spec,
            &program,
            &[0],
            LptmMode::Sample { shots: 10_000, seed: 5 },
            &caps(),
        )
        .unwrap();
        assert!((sampled[0] - 0.5).abs() <= 0.015, "frequency {}", sampled[0]);
    }

    #[test]
    fn two_step_walk_matches_trajectory_enumeration() {
        // Two tape bits, two biased steps; enumerate Birkhoff trajectories
        // as the oracle.
        let step_a = sinkhorn(from_rows(&[&[0.7, 0.2], &[0.3, 0.8]]), 200);
        let step_b = sinkhorn(from_rows(&[&[0.4, 0.5], &[0.6, 0.5]]), 200);
        let spec = LtmSpec {
            kind: MachineKind::Probabilistic,
            proc_dim: 1,
            site_dim: 2,
            tape_len: 2,
            gates: vec![LocalOp::Stochastic(step_a.clone()), LocalOp::Stochastic(step_b.clone())],
            head_start: 0,
            start_proc: 0,
            final_proc: vec![],
            input_sites: vec![0, 1],
            output_sites: vec![0, 1],
        };
        let program = vec![GateStep::new(0, 0, 1), GateStep::new(1, 1, 0)];
        let exact = lptm_run(&spec, &program, &[0, 1], LptmMode::Exact, &caps()).unwrap();

        let terms_a = birkhoff_decompose(&step_a, 1e-9).unwrap();
        let terms_b = birkhoff_decompose(&step_b, 1e-9).unwrap();
        let mut oracle = vec![0.0f64; 4];
        for (wa, pa) in &terms_a {
            for (wb, pb) in &terms_b {
                let mut bits = [0usize, 1];
                bits[0] = pa[bits[0]];
                bits[1] = pb[bits[1]];
                oracle[bits[0] * 2 + bits[1]] += wa * wb;
            }
        }
        assert!(l1(&exact, &oracle) <= 1e-10);
    }
}
