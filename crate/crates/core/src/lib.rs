//! Sequential preparation of matrix-product states and their classical and
//! stochastic relatives.
//!
//! The crate is organized around one pipeline and its supporting cast:
//!
//! - [`channels`]: quantum channels as Kraus lists, their isometric and
//!   unitary dilations, transfer matrices, and stochastic shadows.
//! - [`mps`]: matrix-product states with vector, projected, or periodic
//!   boundaries, extraction from dense state vectors, and per-site channel
//!   views.
//! - [`compile`]: compilation of an MPS into a sequential circuit acting on
//!   one correlator register plus one fresh site register per step, with the
//!   correlator guaranteed to disentangle at the end of the sweep.
//! - [`ltm`]: local tape machines (classical, probabilistic, quantum), gate
//!   compilers onto them, and a one-directional variant built on
//!   teleportation.
//! - [`tns`]: directed networks of completely positive maps generalizing the
//!   chain geometry, with dense evaluation and flattening back to an MPS.
//! - [`smps`]: the stochastic analogue of everything above: Birkhoff
//!   decompositions, nonnegative matrix factorization, stochastic MPS, and
//!   sequential sampling programs.
//!
//! Everything is dense and desk-scale by design: every operation is checked
//! against brute-force contraction in the test suite, and dimension caps
//! refuse inputs that would silently leave that regime.

pub mod caps;
pub mod channels;
pub mod error;
pub mod ltm;
pub mod matrix;
pub mod compile;
pub mod mps;
pub mod smps;
pub mod tns;

pub use error::{CoreError, Result};
