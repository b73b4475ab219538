//! Dense-simulation size caps.
//!
//! Every dense contraction in the crate checks its total dimension against a
//! cap before allocating. The defaults keep runs interactive on a laptop;
//! callers may raise them explicitly (the CLI exposes an environment
//! override).

use crate::error::{CoreError, Result};

/// Caps on dense object sizes, in numbers of amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeskCaps {
    /// Dense state vectors: `d^N` for statevector extraction and machine runs.
    pub statevector: u128,
    /// Circuit runs: `d^N * chi` amplitudes for the tape plus correlator.
    pub circuit: u128,
    /// Network contraction: product of live wire dimensions times emitted
    /// physical dimensions at any intermediate stage.
    pub contraction: u128,
}

impl Default for DeskCaps {
    fn default() -> Self {
        DeskCaps {
            statevector: 1 << 16,
            circuit: 1 << 18,
            contraction: 1 << 18,
        }
    }
}

impl DeskCaps {
    /// Caps scaled by `factor`, used by the CLI override.
    pub fn scaled(factor: u128) -> Self {
        let d = DeskCaps::default();
        DeskCaps {
            statevector: d.statevector.saturating_mul(factor),
            circuit: d.circuit.saturating_mul(factor),
            contraction: d.contraction.saturating_mul(factor),
        }
    }

    pub fn check_statevector(&self, needed: u128, context: &'static str) -> Result<()> {
        if needed > self.statevector {
            return Err(CoreError::CapExceeded {
                context,
                needed,
                cap: self.statevector,
            });
        }
        Ok(())
    }

    pub fn check_circuit(&self, needed: u128, context: &'static str) -> Result<()> {
        if needed > self.circuit {
            return Err(CoreError::CapExceeded {
                context,
                needed,
                cap: self.circuit,
            });
        }
        Ok(())
    }

    pub fn check_contraction(&self, needed: u128, context: &'static str) -> Result<()> {
        if needed > self.contraction {
            return Err(CoreError::CapExceeded {
                context,
                needed,
                cap: self.contraction,
            });
        }
        Ok(())
    }
}

/// `base^exp` saturating at `u128::MAX`, for cap checks on `d^N`.
pub fn checked_pow(base: usize, exp: usize) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..exp {
        acc = acc.saturating_mul(base as u128);
    }
    acc
}
