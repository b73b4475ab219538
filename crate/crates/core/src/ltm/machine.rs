//! Local tape machines: a finite processor coupled to one tape site at a
//! time by a walking head.
//!
//! A machine is a gate table plus a program. Each program step applies one
//! local operation to (processor x site-under-head), shifts the head by at
//! most one cell, and advances the program counter. The machine state is kept
//! in the cheapest faithful representation and promoted on demand: a basis
//! configuration stays classical until a stochastic operation spreads it into
//! a joint distribution or a unitary lifts it into an amplitude vector, and a
//! channel step turns amplitudes into a density matrix.
//!
//! Joint indices are `processor * d^N + tape` with tape site 0 the most
//! significant digit; local indices are `processor * d + digit`.

use crate::caps::{checked_pow, DeskCaps};
use crate::channels::{validate_tp, Channel};
use crate::error::{CoreError, Result};
use crate::matrix::{c64, unitarity_deviation, CMat, RMat, C64};

/// Which state representations a machine is allowed to reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MachineKind {
    /// Permutation steps only; configurations stay classical.
    Classical,
    /// Permutations and stochastic matrices over classical configurations.
    Probabilistic,
    /// Permutations, unitaries, and channels over quantum states.
    Quantum,
}

/// One entry of the machine's gate table, acting on (processor x site).
#[derive(Debug, Clone)]
pub enum LocalOp {
    /// Bijection on local configurations, `image[from] = to`.
    Permutation(Vec<usize>),
    /// Column-stochastic transition matrix.
    Stochastic(RMat),
    Unitary(CMat),
    Channel(Channel),
}

/// One program step: gate, expected head position, head shift, and an
/// optional jump (`None` falls through to the next step).
#[derive(Debug, Clone, Copy)]
pub struct GateStep {
    pub gate: usize,
    pub site: usize,
    pub shift: i8,
    pub next: Option<usize>,
}

impl GateStep {
    pub fn new(gate: usize, site: usize, shift: i8) -> Self {
        GateStep { gate, site, shift, next: None }
    }
}

/// Machine description: dimensions, gate table, and head start.
#[derive(Debug, Clone)]
pub struct LtmSpec {
    pub kind: MachineKind,
    pub proc_dim: usize,
    pub site_dim: usize,
    pub tape_len: usize,
    pub gates: Vec<LocalOp>,
    pub head_start: usize,
    /// Processor state the machine starts in.
    pub start_proc: usize,
    /// Processor states declared as accepting; recorded for inspection.
    pub final_proc: Vec<usize>,
    /// Tape sites carrying the input, in logical order; informational.
    pub input_sites: Vec<usize>,
    /// Tape sites carrying the output, in logical order; informational.
    pub output_sites: Vec<usize>,
}

/// Machine state in its cheapest faithful representation.
#[derive(Debug, Clone)]
pub enum MachineState {
    Classical { proc: usize, tape: Vec<usize> },
    /// Joint distribution over `proc_dim * d^N` configurations.
    Probabilistic { joint: Vec<f64> },
    /// Amplitudes over the same index space.
    Quantum { amp: Vec<C64> },
    /// Density matrix over the same index space.
    Mixed { rho: CMat },
}

/// Full machine configuration between steps.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub state: MachineState,
    pub head: usize,
    pub ctrl: usize,
}

/// Result of a run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub config: Configuration,
    pub halted: bool,
    pub steps_taken: usize,
    /// Head position before the first step and after every step.
    pub head_path: Vec<usize>,
}

const STOCHASTIC_TOL: f64 = 1e-10;
const UNITARY_TOL: f64 = 1e-8;

impl LtmSpec {
    /// Checks the gate table against the machine kind and all dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.site_dim < 2 || self.proc_dim == 0 || self.tape_len == 0 {
            return Err(CoreError::InvalidInput {
                context: "LtmSpec::validate",
                detail: format!(
                    "degenerate dimensions Q={} d={} N={}",
                    self.proc_dim, self.site_dim, self.tape_len
                ),
            });
        }
        if self.head_start >= self.tape_len || self.start_proc >= self.proc_dim {
            return Err(CoreError::InvalidInput {
                context: "LtmSpec::validate",
                detail: "head or processor start out of range".into(),
            });
        }
        for &p in &self.final_proc {
            if p >= self.proc_dim {
                return Err(CoreError::InvalidInput {
                    context: "LtmSpec::validate",
                    detail: format!("accepting processor state {p} out of range"),
                });
            }
        }
        for sites in [&self.input_sites, &self.output_sites] {
            for &s in sites {
                if s >= self.tape_len {
                    return Err(CoreError::InvalidInput {
                        context: "LtmSpec::validate",
                        detail: format!("designated site {s} out of range"),
                    });
                }
            }
        }
        let local = self.proc_dim * self.site_dim;
        for (g, op) in self.gates.iter().enumerate() {
            match op {
                LocalOp::Permutation(image) => {
                    if image.len() != local {
                        return Err(CoreError::ShapeMismatch {
                            context: "LtmSpec::validate",
                            expected: format!("{local} images"),
                            got: format!("gate {g} has {}", image.len()),
                        });
                    }
                    let mut seen = vec![false; local];
                    for &to in image {
                        if to >= local || seen[to] {
                            return Err(CoreError::InvalidInput {
                                context: "LtmSpec::validate",
                                detail: format!("gate {g} is not a permutation"),
                            });
                        }
                        seen[to] = true;
                    }
                }
                LocalOp::Stochastic(m) => {
                    if self.kind == MachineKind::Classical || self.kind == MachineKind::Quantum {
                        return Err(CoreError::InvalidInput {
                            context: "LtmSpec::validate",
                            detail: format!("gate {g}: stochastic step in a {:?} machine", self.kind),
                        });
                    }
                    if m.shape() != (local, local) {
                        return Err(CoreError::ShapeMismatch {
                            context: "LtmSpec::validate",
                            expected: format!("{local}x{local}"),
                            got: format!("gate {g} is {}x{}", m.nrows(), m.ncols()),
                        });
                    }
                    for j in 0..local {
                        let col = m.column(j);
                        if col.iter().any(|&x| x < -1e-12)
                            || (col.sum() - 1.0).abs() > STOCHASTIC_TOL
                        {
                            return Err(CoreError::InvalidInput {
                                context: "LtmSpec::validate",
                                detail: format!("gate {g} column {j} is not stochastic"),
                            });
                        }
                    }
                }
                LocalOp::Unitary(u) => {
                    if self.kind != MachineKind::Quantum {
                        return Err(CoreError::InvalidInput {
                            context: "LtmSpec::validate",
                            detail: format!("gate {g}: unitary step in a {:?} machine", self.kind),
                        });
                    }
                    if u.shape() != (local, local) {
                        return Err(CoreError::ShapeMismatch {
                            context: "LtmSpec::validate",
                            expected: format!("{local}x{local}"),
                            got: format!("gate {g} is {}x{}", u.nrows(), u.ncols()),
                        });
                    }
                    let dev = unitarity_deviation(u);
                    if dev > UNITARY_TOL {
                        return Err(CoreError::InvalidInput {
                            context: "LtmSpec::validate",
                            detail: format!("gate {g} unitarity deviation {dev:.3e}"),
                        });
                    }
                }
                LocalOp::Channel(ch) => {
                    if self.kind != MachineKind::Quantum {
                        return Err(CoreError::InvalidInput {
                            context: "LtmSpec::validate",
                            detail: format!("gate {g}: channel step in a {:?} machine", self.kind),
                        });
                    }
                    if ch.dim_in() != local || ch.dim_out() != local {
                        return Err(CoreError::ShapeMismatch {
                            context: "LtmSpec::validate",
                            expected: format!("{local} -> {local}"),
                            got: format!("gate {g} is {} -> {}", ch.dim_in(), ch.dim_out()),
                        });
                    }
                    let rep = validate_tp(ch, UNITARY_TOL);
                    if !rep.is_tp {
                        return Err(CoreError::NotTracePreserving {
                            deviation: rep.deviation,
                            tol: UNITARY_TOL,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks a program's references against the spec.
    pub fn validate_program(&self, program: &[GateStep]) -> Result<()> {
        for (k, step) in program.iter().enumerate() {
            if step.gate >= self.gates.len() {
                return Err(CoreError::InvalidInput {
                    context: "LtmSpec::validate_program",
                    detail: format!("step {k} references missing gate {}", step.gate),
                });
            }
            if step.site >= self.tape_len {
                return Err(CoreError::InvalidInput {
                    context: "LtmSpec::validate_program",
                    detail: format!("step {k} targets site {} of {}", step.site, self.tape_len),
                });
            }
            if step.shift.abs() > 1 {
                return Err(CoreError::InvalidInput {
                    context: "LtmSpec::validate_program",
                    detail: format!("step {k} shifts by {}", step.shift),
                });
            }
            if let Some(next) = step.next {
                if next > program.len() {
                    return Err(CoreError::InvalidInput {
                        context: "LtmSpec::validate_program",
                        detail: format!("step {k} jumps to {next} past the program end"),
                    });
                }
            }
        }
        Ok(())
    }

    fn joint_dim(&self) -> u128 {
        checked_pow(self.site_dim, self.tape_len).saturating_mul(self.proc_dim as u128)
    }
}

fn site_stride(d: usize, n: usize, site: usize) -> usize {
    d.pow((n - 1 - site) as u32)
}

fn classical_to_joint_index(spec: &LtmSpec, proc: usize, tape: &[usize]) -> usize {
    let tape_idx = crate::mps::statevector_index(spec.site_dim, tape);
    proc * spec.site_dim.pow(spec.tape_len as u32) + tape_idx
}

fn promote_probabilistic(spec: &LtmSpec, proc: usize, tape: &[usize], caps: &DeskCaps) -> Result<Vec<f64>> {
    caps.check_statevector(spec.joint_dim(), "ltm joint distribution")?;
    let mut joint = vec![0.0; spec.joint_dim() as usize];
    joint[classical_to_joint_index(spec, proc, tape)] = 1.0;
    Ok(joint)
}

fn promote_quantum(spec: &LtmSpec, proc: usize, tape: &[usize], caps: &DeskCaps) -> Result<Vec<C64>> {
    caps.check_statevector(spec.joint_dim(), "ltm amplitude vector")?;
    let mut amp = vec![c64(0.0, 0.0); spec.joint_dim() as usize];
    amp[classical_to_joint_index(spec, proc, tape)] = c64(1.0, 0.0);
    Ok(amp)
}

/// Splits a joint index into (processor, upper tape digits, site digit,
/// lower tape digits) bookkeeping for local application.
struct LocalView {
    d: usize,
    q: usize,
    stride: usize,
    tape_dim: usize,
}

impl LocalView {
    fn new(spec: &LtmSpec, site: usize) -> Self {
        LocalView {
            d: spec.site_dim,
            q: spec.proc_dim,
            stride: site_stride(spec.site_dim, spec.tape_len, site),
            tape_dim: spec.site_dim.pow(spec.tape_len as u32),
        }
    }

    /// Joint index for (processor, rest-of-tape block, local digit).
    fn index(&self, proc: usize, rest: usize, digit: usize) -> usize {
        let high = rest / self.stride;
        let low = rest % self.stride;
        proc * self.tape_dim + (high * self.d + digit) * self.stride + low
    }

    fn rest_count(&self) -> usize {
        self.tape_dim / self.d
    }

    fn local_dim(&self) -> usize {
        self.q * self.d
    }
}

fn apply_permutation_vec<T: Copy + Default>(
    view: &LocalView,
    image: &[usize],
    data: &[T],
) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for proc in 0..view.q {
        for digit in 0..view.d {
            let from_local = proc * view.d + digit;
            let to_local = image[from_local];
            let (to_proc, to_digit) = (to_local / view.d, to_local % view.d);
            for rest in 0..view.rest_count() {
                out[view.index(to_proc, rest, to_digit)] =
                    data[view.index(proc, rest, digit)];
            }
        }
    }
    out
}

fn apply_matrix_f64(view: &LocalView, m: &RMat, data: &[f64]) -> Vec<f64> {
    let local = view.local_dim();
    let mut out = vec![0.0; data.len()];
    let mut sub = vec![0.0; local];
    for rest in 0..view.rest_count() {
        for proc in 0..view.q {
            for digit in 0..view.d {
                sub[proc * view.d + digit] = data[view.index(proc, rest, digit)];
            }
        }
        for r in 0..local {
            let mut acc = 0.0;
            for (c, s) in sub.iter().enumerate() {
                acc += m[(r, c)] * s;
            }
            out[view.index(r / view.d, rest, r % view.d)] = acc;
        }
    }
    out
}

fn apply_matrix_c64(view: &LocalView, m: &CMat, data: &[C64]) -> Vec<C64> {
    let local = view.local_dim();
    let mut out = vec![c64(0.0, 0.0); data.len()];
    let mut sub = vec![c64(0.0, 0.0); local];
    for rest in 0..view.rest_count() {
        for proc in 0..view.q {
            for digit in 0..view.d {
                sub[proc * view.d + digit] = data[view.index(proc, rest, digit)];
            }
        }
        for r in 0..local {
            let mut acc = c64(0.0, 0.0);
            for (c, s) in sub.iter().enumerate() {
                acc += m[(r, c)] * s;
            }
            out[view.index(r / view.d, rest, r % view.d)] = acc;
        }
    }
    out
}

/// Lifts a local operator to the full joint space; only used for density
/// matrices, whose dimension the contraction cap keeps small.
fn lift_operator(view: &LocalView, m: &CMat, dim: usize) -> CMat {
    let mut full = CMat::zeros(dim, dim);
    for rest in 0..view.rest_count() {
        for proc in 0..view.q {
            for digit in 0..view.d {
                let col = view.index(proc, rest, digit);
                let from_local = proc * view.d + digit;
                for to_local in 0..view.local_dim() {
                    let v = m[(to_local, from_local)];
                    if v != c64(0.0, 0.0) {
                        full[(view.index(to_local / view.d, rest, to_local % view.d), col)] = v;
                    }
                }
            }
        }
    }
    full
}

fn permutation_unitary(image: &[usize]) -> CMat {
    let n = image.len();
    let mut m = CMat::zeros(n, n);
    for (from, &to) in image.iter().enumerate() {
        m[(to, from)] = c64(1.0, 0.0);
    }
    m
}

fn apply_op(
    spec: &LtmSpec,
    op: &LocalOp,
    state: MachineState,
    site: usize,
    caps: &DeskCaps,
) -> Result<MachineState> {
    let view = LocalView::new(spec, site);
    match (op, state) {
        (LocalOp::Permutation(image), MachineState::Classical { proc, mut tape }) => {
            let local = proc * spec.site_dim + tape[site];
            let to = image[local];
            tape[site] = to % spec.site_dim;
            Ok(MachineState::Classical { proc: to / spec.site_dim, tape })
        }
        (LocalOp::Permutation(image), MachineState::Probabilistic { joint }) => {
            Ok(MachineState::Probabilistic { joint: apply_permutation_vec(&view, image, &joint) })
        }
        (LocalOp::Permutation(image), MachineState::Quantum { amp }) => {
            Ok(MachineState::Quantum { amp: apply_permutation_vec(&view, image, &amp) })
        }
        (LocalOp::Permutation(image), MachineState::Mixed { rho }) => {
            let u = lift_operator(&view, &permutation_unitary(image), rho.nrows());
            Ok(MachineState::Mixed { rho: &u * rho * u.adjoint() })
        }
        (LocalOp::Stochastic(m), MachineState::Classical { proc, tape }) => {
            let joint = promote_probabilistic(spec, proc, &tape, caps)?;
            Ok(MachineState::Probabilistic { joint: apply_matrix_f64(&view, m, &joint) })
        }
        (LocalOp::Stochastic(m), MachineState::Probabilistic { joint }) => {
            Ok(MachineState::Probabilistic { joint: apply_matrix_f64(&view, m, &joint) })
        }
        (LocalOp::Unitary(u), MachineState::Classical { proc, tape }) => {
            let amp = promote_quantum(spec, proc, &tape, caps)?;
            Ok(MachineState::Quantum { amp: apply_matrix_c64(&view, u, &amp) })
        }
        (LocalOp::Unitary(u), MachineState::Quantum { amp }) => {
            Ok(MachineState::Quantum { amp: apply_matrix_c64(&view, u, &amp) })
        }
        (LocalOp::Unitary(u), MachineState::Mixed { rho }) => {
            let full = lift_operator(&view, u, rho.nrows());
            Ok(MachineState::Mixed { rho: &full * rho * full.adjoint() })
        }
        (LocalOp::Channel(ch), state) => {
            let rho = match state {
                MachineState::Classical { proc, tape } => {
                    let amp = promote_quantum(spec, proc, &tape, caps)?;
                    pure_density(&amp, caps)?
                }
                MachineState::Quantum { amp } => pure_density(&amp, caps)?,
                MachineState::Mixed { rho } => rho,
                MachineState::Probabilistic { .. } => {
                    return Err(CoreError::MachineFault {
                        detail: "channel step on a probabilistic state".into(),
                    });
                }
            };
            let dim = rho.nrows();
            let mut out = CMat::zeros(dim, dim);
            for k in ch.kraus() {
                let full = lift_operator(&view, k, dim);
                out += &full * &rho * full.adjoint();
            }
            Ok(MachineState::Mixed { rho: out })
        }
        (LocalOp::Stochastic(_), _) => Err(CoreError::MachineFault {
            detail: "stochastic step on a quantum state".into(),
        }),
        (LocalOp::Unitary(_), MachineState::Probabilistic { .. }) => Err(CoreError::MachineFault {
            detail: "unitary step on a probabilistic state".into(),
        }),
    }
}

fn pure_density(amp: &[C64], caps: &DeskCaps) -> Result<CMat> {
    let dim = amp.len() as u128;
    caps.check_contraction(dim.saturating_mul(dim), "ltm density matrix")?;
    let n = amp.len();
    Ok(CMat::from_fn(n, n, |i, j| amp[i] * amp[j].conj()))
}

/// Applies one program step in place; returns the step actually executed.
pub fn step(
    spec: &LtmSpec,
    program: &[GateStep],
    cfg: &mut Configuration,
    caps: &DeskCaps,
) -> Result<()> {
    let Some(st) = program.get(cfg.ctrl) else {
        return Err(CoreError::MachineFault {
            detail: format!("stepping a halted machine (control {})", cfg.ctrl),
        });
    };
    if st.site != cfg.head {
        return Err(CoreError::MachineFault {
            detail: format!(
                "step {} declares site {} but the head is at {}",
                cfg.ctrl, st.site, cfg.head
            ),
        });
    }
    let state = std::mem::replace(
        &mut cfg.state,
        MachineState::Classical { proc: 0, tape: Vec::new() },
    );
    cfg.state = apply_op(spec, &spec.gates[st.gate], state, cfg.head, caps)?;
    let new_head = cfg.head as i64 + st.shift as i64;
    if new_head < 0 || new_head >= spec.tape_len as i64 {
        return Err(CoreError::MachineFault {
            detail: format!("head shifted to {new_head} outside the tape"),
        });
    }
    cfg.head = new_head as usize;
    cfg.ctrl = st.next.unwrap_or(cfg.ctrl + 1);
    Ok(())
}

/// Runs the program from a classical tape configuration.
pub fn run(
    spec: &LtmSpec,
    program: &[GateStep],
    tape: &[usize],
    max_steps: usize,
    caps: &DeskCaps,
) -> Result<RunTrace> {
    if tape.len() != spec.tape_len || tape.iter().any(|&x| x >= spec.site_dim) {
        return Err(CoreError::InvalidInput {
            context: "ltm::run",
            detail: "initial tape does not fit the machine".into(),
        });
    }
    let init = MachineState::Classical { proc: spec.start_proc, tape: tape.to_vec() };
    run_from(spec, program, init, max_steps, caps)
}

/// Runs the program from an arbitrary initial state.
pub fn run_from(
    spec: &LtmSpec,
    program: &[GateStep],
    state: MachineState,
    max_steps: usize,
    caps: &DeskCaps,
) -> Result<RunTrace> {
    spec.validate()?;
    spec.validate_program(program)?;
    let mut cfg = Configuration { state, head: spec.head_start, ctrl: 0 };
    let mut head_path = vec![cfg.head];
    let mut steps_taken = 0;
    while cfg.ctrl < program.len() {
        if steps_taken >= max_steps {
            return Ok(RunTrace { config: cfg, halted: false, steps_taken, head_path });
        }
        step(spec, program, &mut cfg, caps)?;
        steps_taken += 1;
        head_path.push(cfg.head);
    }
    Ok(RunTrace { config: cfg, halted: true, steps_taken, head_path })
}

/// Identity permutation on the local space, the walking gate.
pub fn identity_perm(local_dim: usize) -> LocalOp {
    LocalOp::Permutation((0..local_dim).collect())
}
