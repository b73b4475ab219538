//! Compiles reversible boolean circuits onto classical tape machines.
//!
//! The gate set is NOT / CNOT / Toffoli, which suffices for any boolean
//! function once ancilla bits carry the outputs. The machine realizes a
//! controlled gate by parking the control bits in the processor: swap the
//! control onto a processor bit, walk to the target, apply the controlled
//! flip against the processor, then walk back and restore the control. Every
//! local step is a permutation, so compiled programs are reversible.

use crate::error::{CoreError, Result};
use crate::ltm::machine::{GateStep, LocalOp, LtmSpec, MachineKind, MachineState};

/// Reversible boolean gates over tape bit indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoolGate {
    Not { target: usize },
    Cnot { control: usize, target: usize },
    Toffoli { controls: (usize, usize), target: usize },
}

/// Largest register the boolean compiler accepts.
pub const MAX_BITS: usize = 16;

// Gate table layout shared by every compiled machine.
const GATE_ID: usize = 0;
const GATE_X: usize = 1;
const GATE_SWAP1: usize = 2;
const GATE_SWAP2: usize = 3;
const GATE_CX1: usize = 4;
const GATE_CCX: usize = 5;

/// Builds a permutation over (p1, p2, site) triples of bits.
fn bit_perm(f: impl Fn(usize, usize, usize) -> (usize, usize, usize)) -> LocalOp {
    let mut image = vec![0; 8];
    for p1 in 0..2 {
        for p2 in 0..2 {
            for s in 0..2 {
                let (q1, q2, t) = f(p1, p2, s);
                image[(p1 * 2 + p2) * 2 + s] = (q1 * 2 + q2) * 2 + t;
            }
        }
    }
    LocalOp::Permutation(image)
}

fn gate_table() -> Vec<LocalOp> {
    vec![
        bit_perm(|p1, p2, s| (p1, p2, s)),
        bit_perm(|p1, p2, s| (p1, p2, 1 - s)),
        bit_perm(|p1, p2, s| (s, p2, p1)),
        bit_perm(|p1, p2, s| (p1, s, p2)),
        bit_perm(|p1, p2, s| (p1, p2, s ^ p1)),
        bit_perm(|p1, p2, s| (p1, p2, s ^ (p1 & p2))),
    ]
}

/// Emits walk and gate steps while tracking the head position.
struct Emitter {
    steps: Vec<GateStep>,
    pos: usize,
}

impl Emitter {
    fn walk_to(&mut self, target: usize) {
        while self.pos < target {
            self.steps.push(GateStep::new(GATE_ID, self.pos, 1));
            self.pos += 1;
        }
        while self.pos > target {
            self.steps.push(GateStep::new(GATE_ID, self.pos, -1));
            self.pos -= 1;
        }
    }

    fn apply(&mut self, gate: usize) {
        self.steps.push(GateStep::new(gate, self.pos, 0));
    }

    fn apply_at(&mut self, gate: usize, site: usize) {
        self.walk_to(site);
        self.apply(gate);
    }
}

fn check_wires(gate: &BoolGate, n_bits: usize) -> Result<()> {
    let (wires, distinct): (Vec<usize>, bool) = match *gate {
        BoolGate::Not { target } => (vec![target], true),
        BoolGate::Cnot { control, target } => (vec![control, target], control != target),
        BoolGate::Toffoli { controls: (c1, c2), target } => {
            (vec![c1, c2, target], c1 != c2 && c1 != target && c2 != target)
        }
    };
    if !distinct {
        return Err(CoreError::InvalidInput {
            context: "compile_boolean_circuit",
            detail: format!("{gate:?} reuses a wire"),
        });
    }
    for w in wires {
        if w >= n_bits {
            return Err(CoreError::InvalidInput {
                context: "compile_boolean_circuit",
                detail: format!("{gate:?} references wire {w} of {n_bits}"),
            });
        }
    }
    Ok(())
}

/// Compiles a boolean circuit into a classical tape machine and program.
pub fn compile_boolean_circuit(
    circuit: &[BoolGate],
    n_bits: usize,
) -> Result<(LtmSpec, Vec<GateStep>)> {
    if n_bits == 0 || n_bits > MAX_BITS {
        return Err(CoreError::InvalidInput {
            context: "compile_boolean_circuit",
            detail: format!("register of {n_bits} bits (limit {MAX_BITS})"),
        });
    }
    for gate in circuit {
        check_wires(gate, n_bits)?;
    }
    let mut em = Emitter { steps: Vec::new(), pos: 0 };
    for gate in circuit {
        match *gate {
            BoolGate::Not { target } => {
                em.apply_at(GATE_X, target);
            }
            BoolGate::Cnot { control, target } => {
                em.apply_at(GATE_SWAP1, control);
                em.apply_at(GATE_CX1, target);
                em.apply_at(GATE_SWAP1, control);
            }
            BoolGate::Toffoli { controls: (c1, c2), target } => {
                em.apply_at(GATE_SWAP1, c1);
                em.apply_at(GATE_SWAP2, c2);
                em.apply_at(GATE_CCX, target);
                em.apply_at(GATE_SWAP2, c2);
                em.apply_at(GATE_SWAP1, c1);
            }
        }
    }
    let spec = LtmSpec {
        kind: MachineKind::Classical,
        proc_dim: 4,
        site_dim: 2,
        tape_len: n_bits,
        gates: gate_table(),
        head_start: 0,
        start_proc: 0,
        final_proc: vec![0],
        input_sites: (0..n_bits).collect(),
        output_sites: (0..n_bits).collect(),
    };
    Ok((spec, em.steps))
}

/// Direct evaluation of a boolean circuit; the oracle the machine is
/// checked against.
pub fn eval_boolean_circuit(circuit: &[BoolGate], bits: &mut [usize]) -> Result<()> {
    for gate in circuit {
        check_wires(gate, bits.len())?;
        match *gate {
            BoolGate::Not { target } => bits[target] ^= 1,
            BoolGate::Cnot { control, target } => bits[target] ^= bits[control],
            BoolGate::Toffoli { controls: (c1, c2), target } => {
                bits[target] ^= bits[c1] & bits[c2];
            }
        }
    }
    Ok(())
}

/// Runs a compiled machine on a classical bit string and returns the tape.
pub fn run_on_bits(spec: &LtmSpec, program: &[GateStep], bits: &[usize]) -> Result<Vec<usize>> {
    let caps = crate::caps::DeskCaps::default();
    let max_steps = program.len() + 1;
    let trace = crate::ltm::machine::run(spec, program, bits, max_steps, &caps)?;
    match trace.config.state {
        MachineState::Classical { proc, tape } => {
            if proc != spec.start_proc {
                return Err(CoreError::MachineFault {
                    detail: format!("processor finished in state {proc}, controls not restored"),
                });
            }
            Ok(tape)
        }
        _ => Err(CoreError::MachineFault {
            detail: "classical run left the classical representation".into(),
        }),
    }
}
