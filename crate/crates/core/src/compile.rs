//! Compiling matrix product states into sequential circuits.
//!
//! A sequential circuit prepares an `N`-site state by moving a single
//! `chi`-dimensional correlator register past the tape: one unitary of size
//! `d * chi` per site, applied in site order, with the site index slower than
//! the correlator index. A circuit is *decoupled* when the correlator ends in
//! a fixed product state (level 0 here), so discarding it leaves the tape
//! pure.
//!
//! Two compilation routes are provided. [`dilate_mps_naive`] dilates each
//! right-canonical site tensor directly and refuses states whose boundary
//! projection cannot be absorbed unitarily. [`decouple_compile`] first sweeps
//! a compression matrix from the last site backwards, rotating every bond so
//! the correlator provably returns to level 0; it accepts any state.

use crate::caps::{checked_pow, DeskCaps};
use crate::error::{CoreError, Result};
use crate::matrix::{c64, complete_to_unitary, kron, thin_svd, unitarity_deviation, CMat, CVec, C64};
use crate::mps::{Boundary, Mps};

/// Relative Schmidt weight above which the tape-correlator cut counts as a
/// product state.
pub const SPLIT_TOL: f64 = 1e-8;
/// Unitarity and normalization slack accepted by the dense runner.
pub const GATE_TOL: f64 = 1e-8;

/// Measurement basis attached to a circuit site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasBasis {
    Computational,
}

/// One unitary of the sequence, acting on (site x correlator).
#[derive(Debug, Clone)]
pub struct CircuitGate {
    pub site: usize,
    /// Square of size `d * chi`, site index slower.
    pub matrix: CMat,
}

/// A sequential preparation circuit.
#[derive(Debug, Clone)]
pub struct SeqCircuit {
    pub d: usize,
    pub chi: usize,
    pub n_sites: usize,
    /// Applied in order; sites may repeat or be skipped.
    pub gates: Vec<CircuitGate>,
    /// Correlator state before the first gate; unit norm, length `chi`.
    pub init_correlator: CVec,
    pub measurements: Vec<(usize, MeasBasis)>,
    /// Promise that the run ends with the correlator in level 0.
    pub decoupled: bool,
}

impl SeqCircuit {
    pub fn new(
        d: usize,
        chi: usize,
        n_sites: usize,
        gates: Vec<CircuitGate>,
        init_correlator: CVec,
        decoupled: bool,
    ) -> Result<Self> {
        let c = SeqCircuit {
            d,
            chi,
            n_sites,
            gates,
            init_correlator,
            measurements: Vec::new(),
            decoupled,
        };
        c.validate()?;
        Ok(c)
    }

    /// Shape, normalization, and unitarity checks.
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.chi == 0 || self.n_sites == 0 {
            return Err(CoreError::InvalidInput {
                context: "SeqCircuit::validate",
                detail: format!(
                    "degenerate dimensions d={} chi={} sites={}",
                    self.d, self.chi, self.n_sites
                ),
            });
        }
        let dim = self.d * self.chi;
        for (j, gate) in self.gates.iter().enumerate() {
            if gate.site >= self.n_sites {
                return Err(CoreError::InvalidInput {
                    context: "SeqCircuit::validate",
                    detail: format!("gate {j} targets site {} of {}", gate.site, self.n_sites),
                });
            }
            if gate.matrix.shape() != (dim, dim) {
                return Err(CoreError::ShapeMismatch {
                    context: "SeqCircuit::validate",
                    expected: format!("{dim}x{dim}"),
                    got: format!("gate {j} is {}x{}", gate.matrix.nrows(), gate.matrix.ncols()),
                });
            }
            let dev = unitarity_deviation(&gate.matrix);
            if dev > GATE_TOL {
                return Err(CoreError::InvalidInput {
                    context: "SeqCircuit::validate",
                    detail: format!("gate {j} is not unitary (deviation {dev:.3e})"),
                });
            }
        }
        if self.init_correlator.len() != self.chi {
            return Err(CoreError::ShapeMismatch {
                context: "SeqCircuit::validate",
                expected: format!("correlator of length {}", self.chi),
                got: format!("{}", self.init_correlator.len()),
            });
        }
        let norm = self.init_correlator.iter().map(|z| z.norm_sqr()).sum::<f64>();
        if (norm - 1.0).abs() > GATE_TOL {
            return Err(CoreError::InvalidInput {
                context: "SeqCircuit::validate",
                detail: format!("initial correlator has squared norm {norm}"),
            });
        }
        for &(site, _) in &self.measurements {
            if site >= self.n_sites {
                return Err(CoreError::InvalidInput {
                    context: "SeqCircuit::validate",
                    detail: format!("measurement targets site {site} of {}", self.n_sites),
                });
            }
        }
        Ok(())
    }

    /// True when the circuit has exactly one gate per site, in site order.
    /// Both compilation routes emit this layout, and composition requires it.
    pub fn standard_layout(&self) -> bool {
        self.gates.len() == self.n_sites
            && self.gates.iter().enumerate().all(|(k, g)| g.site == k)
    }
}

/// Result of a dense circuit run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Full final state, index `tape * chi + correlator` with tape site 0
    /// most significant.
    pub state: Vec<C64>,
    /// Weight of the top Schmidt term across the tape-correlator cut;
    /// 1 means exact product.
    pub separability: f64,
    /// Tape factor, present when the cut is a product within [`SPLIT_TOL`].
    pub tape: Option<Vec<C64>>,
    /// Correlator factor under the same condition.
    pub correlator: Option<Vec<C64>>,
    /// Population of correlator level 0 in the final state.
    pub correlator_ground_weight: f64,
}

fn apply_sequence_gate(
    state: &mut [C64],
    gate: &CMat,
    site: usize,
    d: usize,
    chi: usize,
    n_sites: usize,
) {
    let stride = d.pow((n_sites - 1 - site) as u32);
    let dim = d * chi;
    let mut sub = vec![c64(0.0, 0.0); dim];
    let outer = state.len() / (d * chi);
    for t in 0..outer {
        let high = t / stride;
        let low = t % stride;
        let base = (high * d) * stride + low;
        for i in 0..d {
            let tape_idx = base + i * stride;
            for b in 0..chi {
                sub[i * chi + b] = state[tape_idx * chi + b];
            }
        }
        for r in 0..dim {
            let mut acc = c64(0.0, 0.0);
            for (c, s) in sub.iter().enumerate() {
                acc += gate[(r, c)] * s;
            }
            let (i, b) = (r / chi, r % chi);
            state[(base + i * stride) * chi + b] = acc;
        }
    }
}

fn run_with_tape(c: &SeqCircuit, tape_init: Option<&[C64]>, caps: &DeskCaps) -> Result<RunOutcome> {
    c.validate()?;
    if !c.measurements.is_empty() {
        return Err(CoreError::InvalidInput {
            context: "run_circuit",
            detail: "the dense runner handles unitary circuits only; strip measurements first"
                .into(),
        });
    }
    let tape_dim_u = checked_pow(c.d, c.n_sites);
    caps.check_circuit(tape_dim_u.saturating_mul(c.chi as u128), "run_circuit")?;
    let tape_dim = tape_dim_u as usize;

    let mut state = vec![c64(0.0, 0.0); tape_dim * c.chi];
    match tape_init {
        None => {
            for b in 0..c.chi {
                state[b] = c.init_correlator[b];
            }
        }
        Some(tape) => {
            if tape.len() != tape_dim {
                return Err(CoreError::ShapeMismatch {
                    context: "run_circuit",
                    expected: format!("tape of length {tape_dim}"),
                    got: format!("{}", tape.len()),
                });
            }
            let tn = crate::matrix::norm_sq(tape);
            if (tn - 1.0).abs() > GATE_TOL {
                return Err(CoreError::InvalidInput {
                    context: "run_circuit",
                    detail: format!("initial tape has squared norm {tn}"),
                });
            }
            for (t, &amp) in tape.iter().enumerate() {
                for b in 0..c.chi {
                    state[t * c.chi + b] = amp * c.init_correlator[b];
                }
            }
        }
    }

    for gate in &c.gates {
        apply_sequence_gate(&mut state, &gate.matrix, gate.site, c.d, c.chi, c.n_sites);
    }

    let a = CMat::from_fn(tape_dim, c.chi, |t, b| state[t * c.chi + b]);
    let svd = thin_svd(&a)?;
    let total: f64 = svd.s.iter().map(|s| s * s).sum();
    let separability = if total > 0.0 { svd.s[0] * svd.s[0] / total } else { 0.0 };
    let (tape, correlator) = if separability >= 1.0 - SPLIT_TOL {
        let tape: Vec<C64> = (0..tape_dim).map(|t| svd.u[(t, 0)] * c64(svd.s[0], 0.0)).collect();
        let corr: Vec<C64> = (0..c.chi).map(|b| svd.v_t[(0, b)]).collect();
        (Some(tape), Some(corr))
    } else {
        (None, None)
    };
    // The decoupling promise is scoped to the all-zero tape; custom tape
    // inputs may legitimately entangle the correlator.
    if c.decoupled && tape_init.is_none() && tape.is_none() {
        return Err(CoreError::InvalidInput {
            context: "run_circuit",
            detail: format!(
                "circuit promises decoupling but the final cut has top Schmidt weight {separability}"
            ),
        });
    }
    let ground: f64 = (0..tape_dim).map(|t| state[t * c.chi].norm_sqr()).sum();
    Ok(RunOutcome {
        state,
        separability,
        tape,
        correlator,
        correlator_ground_weight: if total > 0.0 { ground / total } else { 0.0 },
    })
}

/// Runs the circuit on the all-zero tape.
pub fn run_circuit(c: &SeqCircuit, caps: &DeskCaps) -> Result<RunOutcome> {
    run_with_tape(c, None, caps)
}

/// Runs the circuit with a caller-supplied (normalized) initial tape state.
pub fn run_circuit_on(c: &SeqCircuit, tape: &[C64], caps: &DeskCaps) -> Result<RunOutcome> {
    run_with_tape(c, Some(tape), caps)
}

/// Copies a stacked `(d * rows_small) x cols` site isometry into the uniform
/// `(d * chi) x cols` layout, leaving the extra correlator levels zero.
fn embed_stacked(v: &CMat, d: usize, rows_small: usize, chi: usize) -> CMat {
    let cols = v.ncols();
    let mut out = CMat::zeros(d * chi, cols);
    for i in 0..d {
        for b in 0..rows_small {
            for a in 0..cols {
                out[(i * chi + b, a)] = v[(i * rows_small + b, a)];
            }
        }
    }
    out
}

/// Builds the unitary that rotates correlator level 0 into `first_column`.
fn column_rotation(first_column: &CVec) -> Result<CMat> {
    let chi = first_column.len();
    let mut col = CMat::zeros(chi, 1);
    col.column_mut(0).copy_from(first_column);
    complete_to_unitary(&col)
}

/// Compiles any matrix product state into a decoupled sequential circuit.
///
/// The state is rewritten over a projected boundary, padded to a uniform bond
/// dimension `chi`, and swept from the last site backwards: at each site the
/// remainder of the boundary projection is absorbed into the site tensor and
/// refactored, splitting off an exact isometry for the gate and a compressed
/// remainder matrix for the next site. The remainder after the first site is
/// the initial correlator rotation, and the final correlator provably ends in
/// level 0, so the route never fails on well-formed input. The circuit
/// prepares the normalized state.
pub fn decouple_compile(mps: &Mps) -> Result<SeqCircuit> {
    let mut proj = mps.to_projected()?;
    let chi = *proj.bond_dims().iter().max().unwrap();
    proj.pad_to_uniform(chi)?;
    let d = proj.physical_dim();
    let n = proj.n_sites();
    let Boundary::Projected { left, right } = proj.boundary().clone() else {
        unreachable!("projection conversion yields a projected boundary");
    };

    // Backward sweep: m starts as the row vector of the right boundary and
    // shrinks each site's reachable bond space to mu_k = min(chi, d^(N-k)).
    let mut m = CMat::from_fn(1, chi, |_, j| right[j]);
    let mut isometries: Vec<CMat> = vec![CMat::zeros(0, 0); n];
    for k in (0..n).rev() {
        let mu_next = m.nrows();
        let mut w = CMat::zeros(d * mu_next, chi);
        for (i, t) in proj.site(k).iter().enumerate() {
            w.view_mut((i * mu_next, 0), (mu_next, chi)).copy_from(&(&m * t));
        }
        let svd = thin_svd(&w)?;
        let mu = svd.s.len();
        let mut sv = CMat::zeros(mu, chi);
        for r in 0..mu {
            for c in 0..chi {
                sv[(r, c)] = c64(svd.s[r], 0.0) * svd.v_t[(r, c)];
            }
        }
        isometries[k] = svd.u;
        m = sv;
    }

    let mut l_small = CVec::zeros(m.nrows());
    for r in 0..m.nrows() {
        l_small[r] = (0..chi).map(|c| m[(r, c)] * left[c]).sum();
    }
    let norm = l_small.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm < 1e-14 {
        return Err(CoreError::InvalidInput {
            context: "decouple_compile",
            detail: "state has zero norm".into(),
        });
    }
    let mut l_prime = CVec::zeros(chi);
    for r in 0..l_small.len() {
        l_prime[r] = l_small[r] / c64(norm, 0.0);
    }

    let mut gates = Vec::with_capacity(n);
    let mut mu_next = 1usize;
    for (k, iso) in isometries.iter().enumerate().rev() {
        let rows_small = iso.nrows() / d;
        let embedded = embed_stacked(iso, d, rows_small, chi);
        let mut matrix = complete_to_unitary(&embedded)?;
        if k == 0 {
            matrix *= kron(&crate::matrix::identity_c(d), &column_rotation(&l_prime)?);
        }
        gates.push(CircuitGate { site: k, matrix });
        mu_next = rows_small;
    }
    let _ = mu_next;
    gates.reverse();

    let mut init = CVec::zeros(chi);
    init[0] = c64(1.0, 0.0);
    SeqCircuit::new(d, chi, n, gates, init, true)
}

/// Compiles a right-canonical state by dilating each site tensor directly.
///
/// Every site must be an isometry on its input bond, including the last site
/// after the right boundary vector has been folded into it; the route refuses
/// states where that fold is not isometric (in particular whenever the last
/// interior bond exceeds the physical dimension, since then emission would
/// need a projection). Gates are emitted at the uniform size
/// `d * max_bond`. The circuit prepares the normalized state.
pub fn dilate_mps_naive(mps: &Mps) -> Result<SeqCircuit> {
    let proj = mps.to_projected()?;
    let d = proj.physical_dim();
    let n = proj.n_sites();
    let Boundary::Projected { left, right } = proj.boundary().clone() else {
        unreachable!("projection conversion yields a projected boundary");
    };
    let dims = proj.bond_dims();
    let chi_last = dims[n - 1];
    if d < chi_last {
        return Err(CoreError::RouteRefused {
            reason: format!(
                "last interior bond {chi_last} exceeds physical dimension {d}; folding the \
                 boundary projection cannot stay isometric"
            ),
        });
    }

    // Fold the right boundary into the last site, then require every stacked
    // site to be an isometry.
    let mut stacked: Vec<CMat> = (0..n).map(|k| proj.stacked_site(k)).collect();
    {
        let rows = proj.site(n - 1)[0].nrows();
        let mut folded = CMat::zeros(d, chi_last);
        for i in 0..d {
            for a in 0..chi_last {
                folded[(i, a)] =
                    (0..rows).map(|b| right[b] * stacked[n - 1][(i * rows + b, a)]).sum();
            }
        }
        stacked[n - 1] = folded;
    }
    for (k, v) in stacked.iter().enumerate() {
        let dev = crate::matrix::isometry_deviation(v);
        if dev > GATE_TOL {
            if k == n - 1 {
                return Err(CoreError::RouteRefused {
                    reason: format!(
                        "folding the boundary projection into site {k} leaves deviation \
                         {dev:.3e}; deterministic emission needs an isometry"
                    ),
                });
            }
            return Err(CoreError::NotCanonical { site: k, deviation: dev, tol: GATE_TOL });
        }
    }

    let chi = dims[..n].iter().copied().max().unwrap().max(1);
    let norm = left.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm < 1e-14 {
        return Err(CoreError::InvalidInput {
            context: "dilate_mps_naive",
            detail: "left boundary vector is zero".into(),
        });
    }
    let mut l_prime = CVec::zeros(chi);
    for (a, z) in left.iter().enumerate() {
        l_prime[a] = z / c64(norm, 0.0);
    }

    let mut gates = Vec::with_capacity(n);
    for (k, v) in stacked.iter().enumerate() {
        let rows_small = v.nrows() / d;
        let embedded = embed_stacked(v, d, rows_small, chi);
        let mut matrix = complete_to_unitary(&embedded)?;
        if k == 0 {
            matrix *= kron(&crate::matrix::identity_c(d), &column_rotation(&l_prime)?);
        }
        gates.push(CircuitGate { site: k, matrix });
    }

    let mut init = CVec::zeros(chi);
    init[0] = c64(1.0, 0.0);
    SeqCircuit::new(d, chi, n, gates, init, true)
}

fn require_composable(a: &SeqCircuit, b: &SeqCircuit, context: &'static str) -> Result<()> {
    if a.n_sites != b.n_sites {
        return Err(CoreError::ShapeMismatch {
            context: "compose",
            expected: format!("{} sites", a.n_sites),
            got: format!("{}", b.n_sites),
        });
    }
    if !a.standard_layout() || !b.standard_layout() {
        return Err(CoreError::InvalidInput {
            context,
            detail: "both circuits must carry one gate per site in site order".into(),
        });
    }
    if !a.measurements.is_empty() || !b.measurements.is_empty() {
        return Err(CoreError::InvalidInput {
            context,
            detail: "measured circuits cannot be composed".into(),
        });
    }
    Ok(())
}

fn vec_kron(a: &CVec, b: &CVec) -> CVec {
    let mut out = CVec::zeros(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i * b.len() + j] = x * y;
        }
    }
    out
}

/// Chains two preparations over a shared tape: the composite runs `a`'s gate
/// and then `b`'s gate at each site, with the two correlators stacked as
/// (a, b). Running the composite equals running `b` on the tape that `a`
/// prepared, with `a`'s correlator ending in level 0 when `a` decouples.
///
/// The composite never promises decoupling: `b`'s gates act on a tape that is
/// not all zeros, which in general leaves `b`'s correlator correlated with
/// the tape.
pub fn compose(a: &SeqCircuit, b: &SeqCircuit) -> Result<SeqCircuit> {
    if a.d != b.d {
        return Err(CoreError::ShapeMismatch {
            context: "compose",
            expected: format!("physical dimension {}", a.d),
            got: format!("{}", b.d),
        });
    }
    require_composable(a, b, "compose")?;
    let (d, ca, cb) = (a.d, a.chi, b.chi);
    let chi = ca * cb;
    let dim = d * chi;
    let mut gates = Vec::with_capacity(a.n_sites);
    for k in 0..a.n_sites {
        // a's gate sees b's correlator as a spectator and vice versa.
        let ua = kron(&a.gates[k].matrix, &crate::matrix::identity_c(cb));
        let gb = &b.gates[k].matrix;
        let mut ub = CMat::zeros(dim, dim);
        for i in 0..d {
            for i2 in 0..d {
                for sa in 0..ca {
                    for j in 0..cb {
                        for j2 in 0..cb {
                            ub[(i * chi + sa * cb + j, i2 * chi + sa * cb + j2)] =
                                gb[(i * cb + j, i2 * cb + j2)];
                        }
                    }
                }
            }
        }
        gates.push(CircuitGate { site: k, matrix: ub * ua });
    }
    SeqCircuit::new(
        d,
        chi,
        a.n_sites,
        gates,
        vec_kron(&a.init_correlator, &b.init_correlator),
        false,
    )
}

/// Runs two preparations in parallel on a tape of paired sites: composite
/// level `(ia, ib)` at each site, correlators stacked as (a, b). The
/// composite tape state is the site-by-site pairing of the two tape states.
pub fn tensor_compose(a: &SeqCircuit, b: &SeqCircuit) -> Result<SeqCircuit> {
    require_composable(a, b, "tensor_compose")?;
    let (da, db, ca, cb) = (a.d, b.d, a.chi, b.chi);
    let (d, chi) = (da * db, ca * cb);
    let dim = d * chi;
    let mut gates = Vec::with_capacity(a.n_sites);
    for k in 0..a.n_sites {
        let (ga, gb) = (&a.gates[k].matrix, &b.gates[k].matrix);
        let mut g = CMat::zeros(dim, dim);
        for ia in 0..da {
            for ib in 0..db {
                for sa in 0..ca {
                    for sb in 0..cb {
                        let r = (ia * db + ib) * chi + sa * cb + sb;
                        for ia2 in 0..da {
                            for ib2 in 0..db {
                                for sa2 in 0..ca {
                                    for sb2 in 0..cb {
                                        let c = (ia2 * db + ib2) * chi + sa2 * cb + sb2;
                                        g[(r, c)] = ga[(ia * ca + sa, ia2 * ca + sa2)]
                                            * gb[(ib * cb + sb, ib2 * cb + sb2)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gates.push(CircuitGate { site: k, matrix: g });
    }
    SeqCircuit::new(
        d,
        chi,
        a.n_sites,
        gates,
        vec_kron(&a.init_correlator, &b.init_correlator),
        a.decoupled && b.decoupled,
    )
}
