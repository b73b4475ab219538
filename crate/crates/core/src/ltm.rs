//! Tape machines with a finite processor and a locally-updating head, plus
//! compilers from gate-model circuits onto them.

pub mod boolean;
pub mod machine;
pub mod quantum;
pub mod unilateral;

pub use machine::{
    run, run_from, step, Configuration, GateStep, LocalOp, LtmSpec, MachineKind, MachineState,
    RunTrace,
};
