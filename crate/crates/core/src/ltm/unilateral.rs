//! Compiles {CZ, H, T} circuits onto one-way tape machines: the head never
//! moves left, every tape site is unitarily touched at most once, and all
//! measurements happen after the last unitary step.
//!
//! Data lives in per-qubit processor slots so that later non-Clifford gates
//! always act on physical amplitudes; teleporting data onto the tape earlier
//! would smuggle measurement byproducts underneath those gates, and no fixed
//! Pauli correction commutes through a T gate. Each CZ becomes a gadget over
//! three fresh tape sites (resource, output, partner):
//!
//!   * a Bell pair is created between the resource site and the processor
//!     ancilla, then the ancilla's half is parked at the output site,
//!   * the logical CZ is applied between the two processor data slots,
//!   * the operand playing its last entangling gate absorbs its remaining
//!     single-qubit gates and deposits its finished data at the partner
//!     site (with no operand retiring, the partner site simply stays |0>).
//!
//! Measuring (resource, partner) in the Bell basis afterwards teleports the
//! partner's content to the output site up to one of four Pauli byproducts,
//! each outcome with probability exactly 1/4. The corrections stay pure
//! single-site Paulis because the byproduct lands strictly after every gate
//! of the compiled circuit. Qubits still holding data when the program ends
//! are deposited at fresh output sites directly.

use std::collections::HashMap;

use crate::caps::DeskCaps;
use crate::error::{CoreError, Result};
use crate::ltm::machine::{self, GateStep, LocalOp, LtmSpec, MachineKind, MachineState};
use crate::ltm::quantum::{hadamard, t_gate, QGate};
use crate::matrix::{c64, norm_sq, CMat, C64};
use rand::Rng;

/// Single-qubit correction operators, `Xz` meaning Z applied first, then X.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pauli {
    I,
    X,
    Z,
    Xz,
}

/// Outcome-indexed correction table shared by every teleport gadget.
pub const CORRECTION_TABLE: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Z, Pauli::Xz];

/// One end-of-run Bell measurement and where its correction lands.
#[derive(Debug, Clone, Copy)]
pub struct MeasuredPair {
    /// Tape site keeping the retained half of the gadget's Bell pair.
    pub resource_site: usize,
    /// Tape site measured against it.
    pub partner_site: usize,
    /// Tape site receiving the teleported content after correction.
    pub output_site: usize,
}

/// Compiled one-way machine with its measurement layout.
#[derive(Debug, Clone)]
pub struct UnilateralPlan {
    pub spec: LtmSpec,
    pub program: Vec<GateStep>,
    /// One Bell measurement per CZ of the source circuit, in gate order.
    pub pairs: Vec<MeasuredPair>,
    /// corrections[k][m] is applied at pairs[k].output_site for outcome m.
    pub corrections: Vec<[Pauli; 4]>,
    /// Tape sites holding the logical input, in qubit order.
    pub input_sites: Vec<usize>,
    /// Tape sites holding the logical output after corrections.
    pub output_sites: Vec<usize>,
    pub n_qubits: usize,
}

impl UnilateralPlan {
    /// Number of measurement outcomes, i.e. branches of one run.
    pub fn branch_count(&self) -> usize {
        1usize << (2 * self.pairs.len())
    }

    /// Outcome digits of branch `index`, pair 0 slowest.
    pub fn branch_outcomes(&self, index: usize) -> Vec<usize> {
        let k = self.pairs.len();
        (0..k).map(|j| (index >> (2 * (k - 1 - j))) & 3).collect()
    }
}

/// Largest register the one-way compiler accepts.
pub const MAX_ONE_WAY_QUBITS: usize = 6;

/// Measurement probabilities and teleported states must match the dense
/// reference within this tolerance.
pub const BRANCH_TOL: f64 = 1e-10;

// Local gate descriptors; the table is built lazily per compilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum OpKey {
    Walk,
    /// Bell-pair creation between the site and the processor ancilla.
    Bell,
    /// Swap the processor ancilla with the site.
    Park,
    /// Swap data slot q with the site.
    SwapData(usize),
    CzProc(usize, usize),
    HProc(usize),
    TProc(usize),
}

/// Builds the local gate for a key over `m = n_qubits + 2` qubits laid out
/// as [data slots, ancilla, site], most significant first.
fn build_op(key: OpKey, n: usize) -> LocalOp {
    let m = n + 2;
    let site = m - 1;
    let anc = m - 2;
    match key {
        OpKey::Walk => LocalOp::Permutation((0..(1usize << m)).collect()),
        OpKey::Park => LocalOp::Permutation(perm_swap_bits(anc, site, m)),
        OpKey::SwapData(q) => LocalOp::Permutation(perm_swap_bits(q, site, m)),
        OpKey::Bell => {
            // CNOT(site -> ancilla) after H on the site turns |00> into a
            // Bell pair and leaves nothing else on those two qubits.
            let h = embed_one(&hadamard(), site, m);
            let dim = 1usize << m;
            let mut cnot = CMat::zeros(dim, dim);
            for idx in 0..dim {
                let to = if bit_of(idx, site, m) == 1 { flip_bit(idx, anc, m) } else { idx };
                cnot[(to, idx)] = c64(1.0, 0.0);
            }
            LocalOp::Unitary(cnot * h)
        }
        OpKey::CzProc(x, y) => {
            let dim = 1usize << m;
            let mut u = CMat::zeros(dim, dim);
            for idx in 0..dim {
                let sign = if bit_of(idx, x, m) == 1 && bit_of(idx, y, m) == 1 {
                    -1.0
                } else {
                    1.0
                };
                u[(idx, idx)] = c64(sign, 0.0);
            }
            LocalOp::Unitary(u)
        }
        OpKey::HProc(q) => LocalOp::Unitary(embed_one(&hadamard(), q, m)),
        OpKey::TProc(q) => LocalOp::Unitary(embed_one(&t_gate(), q, m)),
    }
}

fn bit_of(idx: usize, pos: usize, m: usize) -> usize {
    (idx >> (m - 1 - pos)) & 1
}

fn flip_bit(idx: usize, pos: usize, m: usize) -> usize {
    idx ^ (1usize << (m - 1 - pos))
}

fn set_bit(idx: usize, pos: usize, m: usize, v: usize) -> usize {
    let mask = 1usize << (m - 1 - pos);
    if v == 1 {
        idx | mask
    } else {
        idx & !mask
    }
}

fn perm_swap_bits(a: usize, b: usize, m: usize) -> Vec<usize> {
    (0..(1usize << m))
        .map(|idx| {
            let (va, vb) = (bit_of(idx, a, m), bit_of(idx, b, m));
            set_bit(set_bit(idx, a, m, vb), b, m, va)
        })
        .collect()
}

fn embed_one(u: &CMat, pos: usize, m: usize) -> CMat {
    let dim = 1usize << m;
    let mut out = CMat::zeros(dim, dim);
    for idx in 0..dim {
        let b = bit_of(idx, pos, m);
        for r in 0..2 {
            let v = u[(r, b)];
            if v != c64(0.0, 0.0) {
                out[(set_bit(idx, pos, m, r), idx)] += v;
            }
        }
    }
    out
}

struct Builder {
    n: usize,
    table: Vec<LocalOp>,
    ids: HashMap<OpKey, usize>,
    steps: Vec<GateStep>,
    head: usize,
}

impl Builder {
    fn new(n: usize) -> Self {
        Builder { n, table: Vec::new(), ids: HashMap::new(), steps: Vec::new(), head: 0 }
    }

    fn gate_id(&mut self, key: OpKey) -> usize {
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        let id = self.table.len();
        self.table.push(build_op(key, self.n));
        self.ids.insert(key, id);
        id
    }

    /// Emits a step at the current head; `advance` moves one cell right.
    fn emit(&mut self, key: OpKey, advance: bool) {
        let gate = self.gate_id(key);
        self.steps.push(GateStep::new(gate, self.head, i8::from(advance)));
        if advance {
            self.head += 1;
        }
    }

    fn emit_singles(&mut self, slot: usize, singles: &[QGate]) {
        for g in singles {
            match *g {
                QGate::H { .. } => self.emit(OpKey::HProc(slot), false),
                QGate::T { .. } => self.emit(OpKey::TProc(slot), false),
                QGate::Cz { .. } => unreachable!("single-qubit list"),
            }
        }
    }
}

/// Compiles a {CZ, H, T} circuit into a one-way machine.
pub fn compile_unilateral(circuit: &[QGate], n_qubits: usize) -> Result<UnilateralPlan> {
    if n_qubits == 0 || n_qubits > MAX_ONE_WAY_QUBITS {
        return Err(CoreError::InvalidInput {
            context: "compile_unilateral",
            detail: format!("register of {n_qubits} qubits (limit {MAX_ONE_WAY_QUBITS})"),
        });
    }
    for gate in circuit {
        let ok = match *gate {
            QGate::H { target } | QGate::T { target } => target < n_qubits,
            QGate::Cz { a, b } => a < n_qubits && b < n_qubits && a != b,
        };
        if !ok {
            return Err(CoreError::InvalidInput {
                context: "compile_unilateral",
                detail: format!("{gate:?} does not fit a {n_qubits}-qubit register"),
            });
        }
    }

    // Index of the last CZ touching each qubit, if any.
    let mut last_cz: Vec<Option<usize>> = vec![None; n_qubits];
    for (k, gate) in circuit.iter().enumerate() {
        if let QGate::Cz { a, b } = *gate {
            last_cz[a] = Some(k);
            last_cz[b] = Some(k);
        }
    }
    // Single-qubit gates trailing a retiring operand's last CZ, folded into
    // its deposit step.
    let trailing: Vec<Vec<QGate>> = (0..n_qubits)
        .map(|q| match last_cz[q] {
            None => Vec::new(),
            Some(k) => circuit[k + 1..]
                .iter()
                .filter(|g| matches!(**g, QGate::H { target } | QGate::T { target } if target == q))
                .copied()
                .collect(),
        })
        .collect();

    let mut b = Builder::new(n_qubits);
    let mut pending: Vec<Vec<QGate>> = vec![Vec::new(); n_qubits];
    let mut retired = vec![false; n_qubits];
    let mut output_sites = vec![usize::MAX; n_qubits];
    let mut pairs = Vec::new();

    // Pick every qubit up into its data slot; input sites go dead at once.
    let input_sites: Vec<usize> = (0..n_qubits).collect();
    for q in 0..n_qubits {
        b.emit(OpKey::SwapData(q), true);
    }

    for (k, gate) in circuit.iter().enumerate() {
        match *gate {
            QGate::H { target } | QGate::T { target } => {
                // Singles on a retired qubit were folded into its deposit.
                if !retired[target] {
                    pending[target].push(*gate);
                }
            }
            QGate::Cz { a: x, b: y } => {
                debug_assert!(!retired[x] && !retired[y]);
                let resource_site = b.head;
                let singles_x = std::mem::take(&mut pending[x]);
                let singles_y = std::mem::take(&mut pending[y]);
                b.emit_singles(x, &singles_x);
                b.emit_singles(y, &singles_y);
                b.emit(OpKey::Bell, true);
                let output_site = b.head;
                b.emit(OpKey::Park, true);
                let partner_site = b.head;
                b.emit(OpKey::CzProc(x, y), false);
                let payload = if last_cz[x] == Some(k) {
                    Some(x)
                } else if last_cz[y] == Some(k) {
                    Some(y)
                } else {
                    None
                };
                match payload {
                    Some(p) => {
                        b.emit_singles(p, &trailing[p]);
                        b.emit(OpKey::SwapData(p), true);
                        retired[p] = true;
                        output_sites[p] = output_site;
                    }
                    None => b.emit(OpKey::Walk, true),
                }
                pairs.push(MeasuredPair { resource_site, partner_site, output_site });
            }
        }
    }

    // Deposit everything still held in the processor at fresh sites.
    for q in 0..n_qubits {
        if retired[q] {
            continue;
        }
        let singles = std::mem::take(&mut pending[q]);
        b.emit_singles(q, &singles);
        output_sites[q] = b.head;
        b.emit(OpKey::SwapData(q), true);
    }

    // The final advance would run off the tape; end on the last site.
    if let Some(last) = b.steps.last_mut() {
        last.shift = 0;
        b.head -= 1;
    }
    let tape_len = b.head + 1;

    let spec = LtmSpec {
        kind: MachineKind::Quantum,
        proc_dim: 1usize << (n_qubits + 1),
        site_dim: 2,
        tape_len,
        gates: b.table,
        head_start: 0,
        start_proc: 0,
        final_proc: vec![0],
        input_sites: input_sites.clone(),
        output_sites: output_sites.clone(),
    };
    spec.validate()?;
    spec.validate_program(&b.steps)?;

    let corrections = vec![CORRECTION_TABLE; pairs.len()];
    Ok(UnilateralPlan {
        spec,
        program: b.steps,
        pairs,
        corrections,
        input_sites,
        output_sites,
        n_qubits,
    })
}

/// Checks the one-way contract on a compiled plan: the head never moves
/// left, and each tape site is acted on by at most one program step whose
/// local gate is not of the form (processor action) x (site identity).
pub fn verify_one_way(spec: &LtmSpec, program: &[GateStep]) -> Result<()> {
    let mut head = spec.head_start;
    let mut touched = vec![0usize; spec.tape_len];
    for (k, step) in program.iter().enumerate() {
        if step.shift < 0 {
            return Err(CoreError::MachineFault {
                detail: format!("step {k} moves the head left"),
            });
        }
        if step.site != head {
            return Err(CoreError::MachineFault {
                detail: format!("step {k} addresses site {} with head at {head}", step.site),
            });
        }
        if !site_factor_trivial(&spec.gates[step.gate], spec.proc_dim, spec.site_dim) {
            touched[head] += 1;
        }
        head += step.shift as usize;
        if head >= spec.tape_len && k + 1 < program.len() {
            return Err(CoreError::MachineFault {
                detail: format!("step {k} walks the head off the tape"),
            });
        }
    }
    if let Some(site) = touched.iter().position(|&c| c > 1) {
        return Err(CoreError::MachineFault {
            detail: format!("site {site} is unitarily touched {} times", touched[site]),
        });
    }
    Ok(())
}

/// True when a local gate acts as (processor operator) x (site identity).
fn site_factor_trivial(op: &LocalOp, proc_dim: usize, site_dim: usize) -> bool {
    match op {
        LocalOp::Permutation(image) => {
            for p in 0..proc_dim {
                let target = image[p * site_dim] / site_dim;
                for s in 0..site_dim {
                    let to = image[p * site_dim + s];
                    if to % site_dim != s || to / site_dim != target {
                        return false;
                    }
                }
            }
            true
        }
        LocalOp::Unitary(u) => {
            // Compare every diagonal site block to the s = 0 block and
            // require all off-diagonal site blocks to vanish.
            for pr in 0..proc_dim {
                for pc in 0..proc_dim {
                    let base = u[(pr * site_dim, pc * site_dim)];
                    for sr in 0..site_dim {
                        for sc in 0..site_dim {
                            let v = u[(pr * site_dim + sr, pc * site_dim + sc)];
                            let want = if sr == sc { base } else { c64(0.0, 0.0) };
                            if (v - want).norm() > 1e-12 {
                                return false;
                            }
                        }
                    }
                }
            }
            true
        }
        _ => false,
    }
}

/// Runs the compiled unitary part once on a logical input state of
/// `2^n_qubits` amplitudes, returning the full pre-measurement state.
pub fn run_unilateral(plan: &UnilateralPlan, input: &[C64], caps: &DeskCaps) -> Result<Vec<C64>> {
    let n = plan.n_qubits;
    if input.len() != 1usize << n {
        return Err(CoreError::ShapeMismatch {
            context: "run_unilateral",
            expected: format!("{} amplitudes", 1usize << n),
            got: input.len().to_string(),
        });
    }
    let total_bits = total_bits(plan);
    caps.check_statevector(1u128 << total_bits, "run_unilateral")?;
    let dim = 1usize << total_bits;
    let mut amp = vec![c64(0.0, 0.0); dim];
    // Input qubit q sits at tape site q; everything else starts at |0>.
    let tape_shift = plan.spec.tape_len - n;
    for (z, &v) in input.iter().enumerate() {
        amp[z << tape_shift] = v;
    }
    let trace = machine::run_from(
        &plan.spec,
        &plan.program,
        MachineState::Quantum { amp },
        plan.program.len() + 1,
        caps,
    )?;
    if !trace.halted {
        return Err(CoreError::MachineFault { detail: "one-way program did not halt".into() });
    }
    match trace.config.state {
        MachineState::Quantum { amp } => Ok(amp),
        _ => Err(CoreError::Internal { detail: "quantum run changed state kind".into() }),
    }
}

fn total_bits(plan: &UnilateralPlan) -> usize {
    plan.n_qubits + 1 + plan.spec.tape_len
}

/// Full-state bit position of a tape site.
fn site_bit(plan: &UnilateralPlan, site: usize) -> usize {
    plan.n_qubits + 1 + site
}

/// Bell state component map: outcome m pairs |c> with (index, coefficient)
/// of sigma_m|c>, where |B_m> = (I x sigma_m) |omega>.
fn bell_component(m: usize, c: usize) -> (usize, f64) {
    match m {
        0 => (c, 1.0),
        1 => (1 - c, 1.0),
        2 => (c, if c == 1 { -1.0 } else { 1.0 }),
        3 => (1 - c, if c == 1 { -1.0 } else { 1.0 }),
        _ => unreachable!("outcome digits are 0..4"),
    }
}

/// Projects one measured pair onto Bell outcome `m`, without normalizing.
fn project_pair(state: &[C64], total_bits: usize, pos_a: usize, pos_b: usize, m: usize) -> Vec<C64> {
    let dim = state.len();
    let mut out = vec![c64(0.0, 0.0); dim];
    let mask_a = 1usize << (total_bits - 1 - pos_a);
    let mask_b = 1usize << (total_bits - 1 - pos_b);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    for idx in 0..dim {
        if idx & mask_a != 0 || idx & mask_b != 0 {
            continue;
        }
        let mut overlap = c64(0.0, 0.0);
        for c in 0..2usize {
            let (v, coef) = bell_component(m, c);
            let at = idx | (mask_a * c) | (mask_b * v);
            overlap += state[at] * (coef * half);
        }
        for c in 0..2usize {
            let (v, coef) = bell_component(m, c);
            let at = idx | (mask_a * c) | (mask_b * v);
            out[at] = overlap * (coef * half);
        }
    }
    out
}

/// Applies a Pauli correction at one tape site of the full state.
fn apply_correction(state: &mut [C64], total_bits: usize, pos: usize, p: Pauli) {
    if p == Pauli::I {
        return;
    }
    let mask = 1usize << (total_bits - 1 - pos);
    for idx in 0..state.len() {
        if idx & mask != 0 {
            continue;
        }
        let hi = idx | mask;
        match p {
            Pauli::I => unreachable!(),
            Pauli::X => state.swap(idx, hi),
            Pauli::Z => state[hi] = -state[hi],
            Pauli::Xz => {
                // X Z maps |0> -> |1> and |1> -> -|0>.
                let (lo_v, hi_v) = (state[idx], state[hi]);
                state[idx] = -hi_v;
                state[hi] = lo_v;
            }
        }
    }
}

/// One measurement branch of a unilateral run.
#[derive(Debug, Clone)]
pub struct Branch {
    /// Bell outcome digit per measured pair, in pair order.
    pub outcomes: Vec<usize>,
    pub probability: f64,
    /// Normalized full machine state after corrections.
    pub state: Vec<C64>,
}

/// Projects the pre-measurement state onto one outcome combination and
/// applies the corrections. The probability is exact, not conditioned.
pub fn project_branch(plan: &UnilateralPlan, amp: &[C64], outcomes: &[usize]) -> Result<Branch> {
    if outcomes.len() != plan.pairs.len() {
        return Err(CoreError::ShapeMismatch {
            context: "project_branch",
            expected: format!("{} outcome digits", plan.pairs.len()),
            got: outcomes.len().to_string(),
        });
    }
    let bits = total_bits(plan);
    if amp.len() != 1usize << bits {
        return Err(CoreError::ShapeMismatch {
            context: "project_branch",
            expected: format!("{} amplitudes", 1usize << bits),
            got: amp.len().to_string(),
        });
    }
    if let Some(&bad) = outcomes.iter().find(|&&m| m > 3) {
        return Err(CoreError::InvalidInput {
            context: "project_branch",
            detail: format!("Bell outcome digit {bad}"),
        });
    }
    let mut state = amp.to_vec();
    for (pair, &m) in plan.pairs.iter().zip(outcomes) {
        state = project_pair(
            &state,
            bits,
            site_bit(plan, pair.resource_site),
            site_bit(plan, pair.partner_site),
            m,
        );
    }
    let probability = norm_sq(&state);
    if probability > 0.0 {
        let scale = c64(1.0 / probability.sqrt(), 0.0);
        for v in state.iter_mut() {
            *v *= scale;
        }
    }
    for ((pair, table), &m) in plan.pairs.iter().zip(&plan.corrections).zip(outcomes) {
        apply_correction(&mut state, bits, site_bit(plan, pair.output_site), table[m]);
    }
    Ok(Branch { outcomes: outcomes.to_vec(), probability, state })
}

/// Enumerates all measurement branches of one run. The callback receives
/// each corrected branch; states are not retained between calls.
pub fn for_each_branch(
    plan: &UnilateralPlan,
    input: &[C64],
    caps: &DeskCaps,
    mut visit: impl FnMut(&Branch),
) -> Result<()> {
    let amp = run_unilateral(plan, input, caps)?;
    for index in 0..plan.branch_count() {
        let branch = project_branch(plan, &amp, &plan.branch_outcomes(index))?;
        visit(&branch);
    }
    Ok(())
}

/// Samples one branch by drawing each pair's outcome from its conditional
/// distribution, mirroring a physical end-of-run measurement.
pub fn sample_branch<R: Rng + ?Sized>(
    plan: &UnilateralPlan,
    input: &[C64],
    caps: &DeskCaps,
    rng: &mut R,
) -> Result<Branch> {
    let amp = run_unilateral(plan, input, caps)?;
    let bits = total_bits(plan);
    let mut state = amp;
    let mut outcomes = Vec::with_capacity(plan.pairs.len());
    let mut probability = 1.0;
    for pair in &plan.pairs {
        let (pos_a, pos_b) = (site_bit(plan, pair.resource_site), site_bit(plan, pair.partner_site));
        let projected: Vec<Vec<C64>> =
            (0..4).map(|m| project_pair(&state, bits, pos_a, pos_b, m)).collect();
        let weights: Vec<f64> = projected.iter().map(|s| norm_sq(s)).collect();
        let total: f64 = weights.iter().sum();
        let mut draw = rng.random_range(0.0..total);
        let mut pick = 3;
        for (m, &w) in weights.iter().enumerate() {
            if draw < w {
                pick = m;
                break;
            }
            draw -= w;
        }
        probability *= weights[pick] / total;
        let norm = weights[pick].sqrt();
        state = projected.into_iter().nth(pick).expect("pick < 4");
        if norm > 0.0 {
            let scale = c64(1.0 / norm, 0.0);
            for v in state.iter_mut() {
                *v *= scale;
            }
        }
        outcomes.push(pick);
    }
    for ((pair, table), &m) in plan.pairs.iter().zip(&plan.corrections).zip(&outcomes) {
        apply_correction(&mut state, bits, site_bit(plan, pair.output_site), table[m]);
    }
    Ok(Branch { outcomes, probability, state })
}

/// Reads the logical register off a corrected branch state. The register
/// must factor from the rest of the machine, which holds for every branch
/// of a one-way run: the measured pairs sit in Bell states and all other
/// positions return to |0>. Slicing along the register at the heaviest
/// amplitude then recovers the logical state up to normalization.
pub fn logical_state(plan: &UnilateralPlan, state: &[C64]) -> Result<Vec<C64>> {
    let bits = total_bits(plan);
    let n = plan.n_qubits;
    let out_masks: Vec<usize> =
        plan.output_sites.iter().map(|&s| 1usize << (bits - 1 - site_bit(plan, s))).collect();
    let all_out: usize = out_masks.iter().sum();
    let anchor = state
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
        .map(|(idx, _)| idx)
        .unwrap_or(0);
    let rest = anchor & !all_out;
    let mut logical = vec![c64(0.0, 0.0); 1usize << n];
    for (z, slot) in logical.iter_mut().enumerate() {
        let mut idx = rest;
        for (q, mask) in out_masks.iter().enumerate() {
            if (z >> (n - 1 - q)) & 1 == 1 {
                idx |= mask;
            }
        }
        *slot = state[idx];
    }
    let weight = norm_sq(&logical);
    if weight < 1e-12 {
        return Err(CoreError::Internal {
            detail: "register slice carries no weight".into(),
        });
    }
    let scale = c64(1.0 / weight.sqrt(), 0.0);
    for v in logical.iter_mut() {
        *v *= scale;
    }
    Ok(logical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltm::quantum::simulate_dense;
    use crate::matrix::fidelity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caps() -> DeskCaps {
        DeskCaps::scaled(64)
    }

    fn random_state(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
        let dim = 1usize << n;
        let mut v: Vec<C64> =
            (0..dim).map(|_| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let norm = norm_sq(&v).sqrt();
        for x in v.iter_mut() {
            *x /= c64(norm, 0.0);
        }
        v
    }

    /// Independent reference for a corrected branch: the dense circuit
    /// output on the register's home sites, Bell pairs on the measured
    /// pairs, |0> everywhere else, assembled directly from definitions.
    fn reference_branch_state(
        plan: &UnilateralPlan,
        circuit: &[QGate],
        input: &[C64],
        outcomes: &[usize],
    ) -> Vec<C64> {
        let n = plan.n_qubits;
        let logical = simulate_dense(circuit, n, input).unwrap();
        let bits = total_bits(plan);
        let mut state = vec![c64(0.0, 0.0); 1usize << bits];
        let k = plan.pairs.len();
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for (z, &amp) in logical.iter().enumerate() {
            if amp == c64(0.0, 0.0) {
                continue;
            }
            for comb in 0..(1usize << k) {
                let mut idx = 0usize;
                let mut coef = amp;
                for q in 0..n {
                    if (z >> (n - 1 - q)) & 1 == 1 {
                        idx |= 1 << (bits - 1 - site_bit(plan, plan.output_sites[q]));
                    }
                }
                for (j, pair) in plan.pairs.iter().enumerate() {
                    let c = (comb >> j) & 1;
                    let (v, sign) = bell_component(outcomes[j], c);
                    coef *= c64(sign * half, 0.0);
                    idx |= c << (bits - 1 - site_bit(plan, pair.resource_site));
                    idx |= v << (bits - 1 - site_bit(plan, pair.partner_site));
                }
                state[idx] += coef;
            }
        }
        state
    }

    fn assert_branches_match(circuit: &[QGate], n: usize, input: &[C64]) {
        let plan = compile_unilateral(circuit, n).unwrap();
        verify_one_way(&plan.spec, &plan.program).unwrap();
        let k = plan.pairs.len();
        let expected_p = 0.25f64.powi(k as i32);
        let mut total = 0.0;
        for_each_branch(&plan, input, &caps(), |branch| {
            assert!(
                (branch.probability - expected_p).abs() <= BRANCH_TOL,
                "branch {:?} probability {} != {}",
                branch.outcomes,
                branch.probability,
                expected_p
            );
            total += branch.probability;
            let want = reference_branch_state(&plan, circuit, input, &branch.outcomes);
            let f = fidelity(&branch.state, &want);
            assert!(f >= 1.0 - BRANCH_TOL, "branch {:?} fidelity {f}", branch.outcomes);
        })
        .unwrap();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn correction_table_is_the_four_paulis() {
        let plan = compile_unilateral(&[QGate::Cz { a: 0, b: 1 }], 2).unwrap();
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(plan.corrections[0], [Pauli::I, Pauli::X, Pauli::Z, Pauli::Xz]);
    }

    #[test]
    fn single_cz_on_basis_input_has_four_uniform_branches() {
        let circuit = [QGate::Cz { a: 0, b: 1 }];
        let plan = compile_unilateral(&circuit, 2).unwrap();
        let mut input = vec![c64(0.0, 0.0); 4];
        input[0] = c64(1.0, 0.0);
        let mut seen = 0;
        for_each_branch(&plan, &input, &caps(), |branch| {
            seen += 1;
            assert!((branch.probability - 0.25).abs() <= 1e-12);
            let logical = logical_state(&plan, &branch.state).unwrap();
            assert!(fidelity(&logical, &input) >= 1.0 - 1e-12);
        })
        .unwrap();
        assert_eq!(seen, 4);
    }

    #[test]
    fn single_cz_matches_dense_on_random_inputs() {
        let circuit = [QGate::Cz { a: 0, b: 1 }];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let input = random_state(2, &mut rng);
            assert_branches_match(&circuit, 2, &input);
        }
    }

    #[test]
    fn late_t_gates_and_dummy_gadget_match_dense() {
        // The first CZ retires nobody: both operands entangle again later,
        // so its partner site stays |0> and the pair teleports vacuum.
        let circuit = [
            QGate::H { target: 0 },
            QGate::Cz { a: 0, b: 1 },
            QGate::T { target: 0 },
            QGate::T { target: 1 },
            QGate::Cz { a: 0, b: 1 },
            QGate::H { target: 1 },
        ];
        let plan = compile_unilateral(&circuit, 2).unwrap();
        assert_eq!(plan.pairs.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let input = random_state(2, &mut rng);
        assert_branches_match(&circuit, 2, &input);
    }

    #[test]
    fn three_qubit_program_exercises_all_payload_cases() {
        // CZ(0,1) is a dummy gadget, CZ(1,2) retires qubit 1, CZ(0,2)
        // retires qubit 0 and leaves qubit 2 for an end deposit.
        let circuit = [
            QGate::H { target: 0 },
            QGate::Cz { a: 0, b: 1 },
            QGate::T { target: 1 },
            QGate::Cz { a: 1, b: 2 },
            QGate::H { target: 2 },
            QGate::T { target: 0 },
            QGate::Cz { a: 0, b: 2 },
            QGate::T { target: 2 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let input = random_state(3, &mut rng);
        assert_branches_match(&circuit, 3, &input);
    }

    #[test]
    fn head_is_monotone_and_sites_are_touched_once() {
        let circuit = [
            QGate::Cz { a: 0, b: 1 },
            QGate::T { target: 0 },
            QGate::Cz { a: 0, b: 2 },
            QGate::H { target: 1 },
        ];
        let plan = compile_unilateral(&circuit, 3).unwrap();
        verify_one_way(&plan.spec, &plan.program).unwrap();
        let bits = total_bits(&plan);
        let tape_shift = plan.spec.tape_len - 3;
        let mut amp = vec![c64(0.0, 0.0); 1usize << bits];
        amp[3usize << tape_shift] = c64(1.0, 0.0);
        let trace = machine::run_from(
            &plan.spec,
            &plan.program,
            MachineState::Quantum { amp },
            plan.program.len() + 1,
            &caps(),
        )
        .unwrap();
        assert!(trace.halted);
        assert!(trace.head_path.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*trace.head_path.last().unwrap(), plan.spec.tape_len - 1);
    }

    #[test]
    fn sampling_agrees_with_enumeration() {
        let circuit = [QGate::H { target: 0 }, QGate::Cz { a: 0, b: 1 }, QGate::T { target: 1 }];
        let plan = compile_unilateral(&circuit, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let input = random_state(2, &mut rng);
        let amp = run_unilateral(&plan, &input, &caps()).unwrap();
        for _ in 0..6 {
            let sampled = sample_branch(&plan, &input, &caps(), &mut rng).unwrap();
            let replayed = project_branch(&plan, &amp, &sampled.outcomes).unwrap();
            assert!((sampled.probability - replayed.probability).abs() <= 1e-12);
            assert!(max_abs_diff_slice(&sampled.state, &replayed.state) < 1e-10);
        }
    }

    fn max_abs_diff_slice(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn rejects_oversized_and_malformed_circuits() {
        assert!(compile_unilateral(&[], 0).is_err());
        assert!(compile_unilateral(&[], MAX_ONE_WAY_QUBITS + 1).is_err());
        assert!(compile_unilateral(&[QGate::Cz { a: 0, b: 0 }], 2).is_err());
        assert!(compile_unilateral(&[QGate::H { target: 2 }], 2).is_err());
    }

    #[test]
    fn never_entangled_qubits_ride_through_untouched() {
        // Qubit 1 sees no CZ at all: its singles act in the processor and
        // it is deposited at the end.
        let circuit = [QGate::H { target: 1 }, QGate::T { target: 1 }, QGate::H { target: 0 }];
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let input = random_state(2, &mut rng);
        assert_branches_match(&circuit, 2, &input);
    }
}
