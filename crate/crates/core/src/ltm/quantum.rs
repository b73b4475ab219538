//! Compiles {CZ, H, T} circuits onto quantum tape machines and provides the
//! dense statevector oracle they are checked against.
//!
//! Single-qubit gates act directly on the site under the head. A CZ between
//! two sites is mediated by the processor qubit: swap one operand into the
//! processor, walk to the other operand, apply the processor-site CZ, then
//! walk back and swap the operand out again. The processor therefore returns
//! to |0> after every such gadget.

use crate::caps::{checked_pow, DeskCaps};
use crate::error::{CoreError, Result};
use crate::ltm::machine::{GateStep, LocalOp, LtmSpec, MachineKind, MachineState};
use crate::matrix::{c64, from_rows, identity_c, kron, CMat, C64};

/// Gates of the compiled circuit model, over tape qubit indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QGate {
    H { target: usize },
    T { target: usize },
    Cz { a: usize, b: usize },
}

/// Gate table layout of compiled quantum machines.
pub const GATE_WALK: usize = 0;
pub const GATE_H: usize = 1;
pub const GATE_T: usize = 2;
pub const GATE_SWAP: usize = 3;
pub const GATE_CZ: usize = 4;

pub(crate) fn hadamard() -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    from_rows(2, 2, &[c64(s, 0.0), c64(s, 0.0), c64(s, 0.0), c64(-s, 0.0)]).unwrap()
}

pub(crate) fn t_gate() -> CMat {
    let w = C64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
    from_rows(2, 2, &[c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), w]).unwrap()
}

fn gate_table() -> Vec<LocalOp> {
    let mut cz = identity_c(4);
    cz[(3, 3)] = c64(-1.0, 0.0);
    vec![
        LocalOp::Permutation(vec![0, 1, 2, 3]),
        LocalOp::Unitary(kron(&identity_c(2), &hadamard())),
        LocalOp::Unitary(kron(&identity_c(2), &t_gate())),
        LocalOp::Permutation(vec![0, 2, 1, 3]),
        LocalOp::Unitary(cz),
    ]
}

fn check_qubits(gate: &QGate, n_qubits: usize) -> Result<()> {
    let (wires, distinct) = match *gate {
        QGate::H { target } | QGate::T { target } => (vec![target], true),
        QGate::Cz { a, b } => (vec![a, b], a != b),
    };
    if !distinct {
        return Err(CoreError::InvalidInput {
            context: "quantum circuit",
            detail: format!("{gate:?} reuses a qubit"),
        });
    }
    for w in wires {
        if w >= n_qubits {
            return Err(CoreError::InvalidInput {
                context: "quantum circuit",
                detail: format!("{gate:?} references qubit {w} of {n_qubits}"),
            });
        }
    }
    Ok(())
}

struct Emitter {
    steps: Vec<GateStep>,
    pos: usize,
}

impl Emitter {
    fn apply_at(&mut self, gate: usize, site: usize) {
        while self.pos < site {
            self.steps.push(GateStep::new(GATE_WALK, self.pos, 1));
            self.pos += 1;
        }
        while self.pos > site {
            self.steps.push(GateStep::new(GATE_WALK, self.pos, -1));
            self.pos -= 1;
        }
        self.steps.push(GateStep::new(gate, self.pos, 0));
    }
}

/// Compiles a {CZ, H, T} circuit into a quantum tape machine and program.
pub fn compile_quantum_circuit(
    circuit: &[QGate],
    n_qubits: usize,
) -> Result<(LtmSpec, Vec<GateStep>)> {
    if n_qubits == 0 {
        return Err(CoreError::InvalidInput {
            context: "compile_quantum_circuit",
            detail: "empty register".into(),
        });
    }
    for gate in circuit {
        check_qubits(gate, n_qubits)?;
    }
    let mut em = Emitter { steps: Vec::new(), pos: 0 };
    for gate in circuit {
        match *gate {
            QGate::H { target } => em.apply_at(GATE_H, target),
            QGate::T { target } => em.apply_at(GATE_T, target),
            QGate::Cz { a, b } => {
                em.apply_at(GATE_SWAP, a);
                em.apply_at(GATE_CZ, b);
                em.apply_at(GATE_SWAP, a);
            }
        }
    }
    let spec = LtmSpec {
        kind: MachineKind::Quantum,
        proc_dim: 2,
        site_dim: 2,
        tape_len: n_qubits,
        gates: gate_table(),
        head_start: 0,
        start_proc: 0,
        final_proc: vec![0],
        input_sites: (0..n_qubits).collect(),
        output_sites: (0..n_qubits).collect(),
    };
    Ok((spec, em.steps))
}

/// Applies the circuit to a dense statevector; the oracle all machine
/// compilations are compared against. Site 0 is the most significant digit.
pub fn simulate_dense(circuit: &[QGate], n_qubits: usize, input: &[C64]) -> Result<Vec<C64>> {
    let dim = 1usize << n_qubits;
    if input.len() != dim {
        return Err(CoreError::ShapeMismatch {
            context: "simulate_dense",
            expected: format!("{dim} amplitudes"),
            got: format!("{}", input.len()),
        });
    }
    for gate in circuit {
        check_qubits(gate, n_qubits)?;
    }
    let mut state = input.to_vec();
    for gate in circuit {
        match *gate {
            QGate::H { target } => apply_single(&mut state, n_qubits, target, &hadamard()),
            QGate::T { target } => apply_single(&mut state, n_qubits, target, &t_gate()),
            QGate::Cz { a, b } => apply_cz(&mut state, n_qubits, a, b),
        }
    }
    Ok(state)
}

pub(crate) fn apply_single(state: &mut [C64], n: usize, target: usize, u: &CMat) {
    let stride = 1usize << (n - 1 - target);
    for base in 0..state.len() / 2 {
        let high = base / stride;
        let low = base % stride;
        let i0 = (high * 2) * stride + low;
        let i1 = i0 + stride;
        let (a, b) = (state[i0], state[i1]);
        state[i0] = u[(0, 0)] * a + u[(0, 1)] * b;
        state[i1] = u[(1, 0)] * a + u[(1, 1)] * b;
    }
}

pub(crate) fn apply_cz(state: &mut [C64], n: usize, a: usize, b: usize) {
    let sa = 1usize << (n - 1 - a);
    let sb = 1usize << (n - 1 - b);
    for (idx, amp) in state.iter_mut().enumerate() {
        if (idx / sa) % 2 == 1 && (idx / sb) % 2 == 1 {
            *amp = -*amp;
        }
    }
}

/// Weight of the state outside the processor-zero block.
pub fn processor_excitation(spec: &LtmSpec, amp: &[C64]) -> f64 {
    let tape_dim = amp.len() / spec.proc_dim;
    amp[tape_dim..].iter().map(|a| a.norm_sqr()).sum()
}

/// Runs a compiled quantum machine on a tape statevector; the processor
/// starts and must end in |0>, and the returned vector is the tape block.
pub fn run_on_state(
    spec: &LtmSpec,
    program: &[GateStep],
    tape_state: &[C64],
    caps: &DeskCaps,
) -> Result<Vec<C64>> {
    let tape_dim = checked_pow(spec.site_dim, spec.tape_len);
    if tape_state.len() as u128 != tape_dim {
        return Err(CoreError::ShapeMismatch {
            context: "run_on_state",
            expected: format!("{tape_dim} amplitudes"),
            got: format!("{}", tape_state.len()),
        });
    }
    caps.check_statevector(tape_dim.saturating_mul(spec.proc_dim as u128), "quantum tape run")?;
    let mut amp = vec![c64(0.0, 0.0); tape_state.len() * spec.proc_dim];
    let offset = spec.start_proc * tape_state.len();
    amp[offset..offset + tape_state.len()].copy_from_slice(tape_state);
    let trace = crate::ltm::machine::run_from(
        spec,
        program,
        MachineState::Quantum { amp },
        program.len() + 1,
        caps,
    )?;
    if !trace.halted {
        return Err(CoreError::MachineFault { detail: "program did not halt".into() });
    }
    let MachineState::Quantum { amp } = trace.config.state else {
        return Err(CoreError::MachineFault { detail: "run left the amplitude representation".into() });
    };
    let leak = processor_excitation(spec, &amp);
    if leak > 1e-12 {
        return Err(CoreError::MachineFault {
            detail: format!("processor finished excited (weight {leak:.3e})"),
        });
    }
    Ok(amp[..tape_state.len()].to_vec())
}
