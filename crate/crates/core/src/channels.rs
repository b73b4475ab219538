//! Quantum channels as Kraus lists, their dilations, and their shadows.
//!
//! A channel is stored as an explicit list of Kraus operators, all of shape
//! `dim_out x dim_in`. Stacking the operators on top of each other gives the
//! isometry `V = sum_l |l> (x) K_l`; completing `V` to a square unitary gives
//! the circuit-level dilation, from which the Kraus list is recovered as the
//! blocks of the first block column. Two classical shadows are derived here
//! as well: the transfer matrix acting on vectorized density matrices, and
//! the stochastic matrix of squared entry moduli acting on probability
//! vectors.

use crate::error::{CoreError, Result};
use crate::matrix::{
    c64, complete_to_unitary, dagger, deviation_from_identity, kron, CMat, RMat, C64,
};

/// Tolerance for trace-preservation checks.
pub const TP_TOL: f64 = 1e-10;
/// Tolerance for self-consistency checks (dilate then extract).
pub const SELF_TOL: f64 = 1e-12;

/// A completely positive map given by explicit Kraus operators.
#[derive(Debug, Clone)]
pub struct Channel {
    kraus: Vec<CMat>,
    dim_in: usize,
    dim_out: usize,
}

impl Channel {
    /// Builds a channel from a nonempty list of equally shaped operators.
    pub fn new(kraus: Vec<CMat>) -> Result<Self> {
        let first = kraus.first().ok_or(CoreError::InvalidInput {
            context: "Channel::new",
            detail: "empty Kraus list".into(),
        })?;
        let (dim_out, dim_in) = first.shape();
        if dim_in == 0 || dim_out == 0 {
            return Err(CoreError::InvalidInput {
                context: "Channel::new",
                detail: "zero-dimensional Kraus operator".into(),
            });
        }
        for (l, k) in kraus.iter().enumerate() {
            if k.shape() != (dim_out, dim_in) {
                return Err(CoreError::ShapeMismatch {
                    context: "Channel::new",
                    expected: format!("{dim_out}x{dim_in}"),
                    got: format!("operator {l} is {}x{}", k.nrows(), k.ncols()),
                });
            }
        }
        Ok(Channel { kraus, dim_in, dim_out })
    }

    /// The channel `rho -> U rho U^dag`.
    pub fn from_unitary(u: &CMat) -> Result<Self> {
        Channel::new(vec![u.clone()])
    }

    /// Convex mixture of channels: Kraus lists merged with `sqrt(p)` weights.
    pub fn mix(parts: &[(f64, Channel)]) -> Result<Self> {
        if parts.is_empty() {
            return Err(CoreError::InvalidInput {
                context: "Channel::mix",
                detail: "empty mixture".into(),
            });
        }
        let mut kraus = Vec::new();
        for (p, ch) in parts {
            if *p < 0.0 {
                return Err(CoreError::InvalidInput {
                    context: "Channel::mix",
                    detail: format!("negative weight {p}"),
                });
            }
            let w = c64(p.sqrt(), 0.0);
            for k in &ch.kraus {
                kraus.push(k * w);
            }
        }
        Channel::new(kraus)
    }

    pub fn kraus(&self) -> &[CMat] {
        &self.kraus
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    /// Number of Kraus operators.
    pub fn rank(&self) -> usize {
        self.kraus.len()
    }

    /// `sum_l K_l^dag K_l`, the operator that equals the identity for a
    /// trace-preserving channel.
    pub fn tp_operator(&self) -> CMat {
        let mut acc = CMat::zeros(self.dim_in, self.dim_in);
        for k in &self.kraus {
            acc += dagger(k) * k;
        }
        acc
    }
}

/// Outcome of a trace-preservation check.
#[derive(Debug, Clone, Copy)]
pub struct TpReport {
    pub is_tp: bool,
    /// Largest entry modulus of `sum K^dag K - 1`.
    pub deviation: f64,
}

/// Checks `sum_l K_l^dag K_l = 1` within `tol`.
pub fn validate_tp(ch: &Channel, tol: f64) -> TpReport {
    let deviation = deviation_from_identity(&ch.tp_operator());
    TpReport { is_tp: deviation <= tol, deviation }
}

/// A density matrix validated on construction.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    mat: CMat,
}

impl DensityMatrix {
    /// Validates hermiticity, unit trace, and positive semidefiniteness
    /// within `tol`.
    pub fn new(mat: CMat, tol: f64) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(CoreError::ShapeMismatch {
                context: "DensityMatrix::new",
                expected: "square matrix".into(),
                got: format!("{}x{}", mat.nrows(), mat.ncols()),
            });
        }
        let herm_dev = crate::matrix::max_abs_diff(&mat, &dagger(&mat));
        if herm_dev > tol {
            return Err(CoreError::InvalidInput {
                context: "DensityMatrix::new",
                detail: format!("not hermitian (deviation {herm_dev:.3e})"),
            });
        }
        let tr: C64 = mat.diagonal().iter().sum();
        if (tr - c64(1.0, 0.0)).norm() > tol.max(1e-12) {
            return Err(CoreError::InvalidInput {
                context: "DensityMatrix::new",
                detail: format!("trace {tr} is not 1"),
            });
        }
        let eig = mat.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < -tol.max(1e-12) {
            return Err(CoreError::InvalidInput {
                context: "DensityMatrix::new",
                detail: format!("negative eigenvalue {min_eig:.3e}"),
            });
        }
        Ok(DensityMatrix { mat })
    }

    /// The pure state `|psi><psi|`; `psi` need not be normalized.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        let n2 = crate::matrix::norm_sq(psi);
        if n2 == 0.0 {
            return Err(CoreError::InvalidInput {
                context: "DensityMatrix::pure",
                detail: "zero vector".into(),
            });
        }
        let d = psi.len();
        let mut m = CMat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = psi[i] * psi[j].conj() / c64(n2, 0.0);
            }
        }
        Ok(DensityMatrix { mat: m })
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }
}

/// Raw action `sum_l K_l m K_l^dag` without any validation.
pub fn apply_map(ch: &Channel, m: &CMat) -> Result<CMat> {
    if m.nrows() != ch.dim_in || m.ncols() != ch.dim_in {
        return Err(CoreError::ShapeMismatch {
            context: "apply_map",
            expected: format!("{0}x{0}", ch.dim_in),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    let mut acc = CMat::zeros(ch.dim_out, ch.dim_out);
    for k in &ch.kraus {
        acc += k * m * dagger(k);
    }
    Ok(acc)
}

/// Applies a trace-preserving channel to a density matrix.
pub fn apply_channel(ch: &Channel, rho: &DensityMatrix) -> Result<DensityMatrix> {
    let tp = validate_tp(ch, TP_TOL);
    if !tp.is_tp {
        return Err(CoreError::NotTracePreserving {
            deviation: tp.deviation,
            tol: TP_TOL,
        });
    }
    let out = apply_map(ch, rho.matrix())?;
    DensityMatrix::new(out, 1e-8)
}

/// Stacks the Kraus operators into the isometry `V = sum_l |l> (x) K_l`.
///
/// `V` has shape `(rank * dim_out) x dim_in` with block row `l` equal to
/// `K_l`; for a trace-preserving channel its columns are orthonormal.
pub fn kraus_to_isometry(ch: &Channel) -> CMat {
    let r = ch.rank();
    let (m, n) = (ch.dim_out, ch.dim_in);
    let mut v = CMat::zeros(r * m, n);
    for (l, k) in ch.kraus.iter().enumerate() {
        v.view_mut((l * m, 0), (m, n)).copy_from(k);
    }
    v
}

/// Completes an isometry to a square unitary whose first block column is the
/// isometry itself. The completion is the deterministic Gram-Schmidt sweep of
/// [`complete_to_unitary`].
pub fn isometry_to_unitary(v: &CMat) -> Result<CMat> {
    complete_to_unitary(v)
}

/// Extracts the Kraus list `K_l = <l| U |0>` from a dilation unitary.
///
/// `u` must be square of size `r * dim_out`; the input space is read as
/// (ancilla (x) system) with the ancilla in its first level, so block `l` of
/// the first `dim_in` columns is `K_l`.
pub fn kraus_from_unitary(u: &CMat, dim_out: usize, dim_in: usize) -> Result<Channel> {
    if u.nrows() != u.ncols() || !u.nrows().is_multiple_of(dim_out) {
        return Err(CoreError::ShapeMismatch {
            context: "kraus_from_unitary",
            expected: format!("square with rows divisible by {dim_out}"),
            got: format!("{}x{}", u.nrows(), u.ncols()),
        });
    }
    if dim_in > u.ncols() {
        return Err(CoreError::ShapeMismatch {
            context: "kraus_from_unitary",
            expected: format!("dim_in <= {}", u.ncols()),
            got: format!("{dim_in}"),
        });
    }
    let r = u.nrows() / dim_out;
    let mut kraus = Vec::with_capacity(r);
    for l in 0..r {
        kraus.push(u.view((l * dim_out, 0), (dim_out, dim_in)).into_owned());
    }
    Channel::new(kraus)
}

/// Ancilla dimension `ceil(rank * dim_out / dim_in)` needed to dilate a
/// channel into a unitary on (ancilla (x) input).
pub fn dilation_ancilla_dim(ch: &Channel) -> usize {
    let num = ch.rank() * ch.dim_out;
    num.div_ceil(ch.dim_in)
}

/// Row-major vectorization `|rho> = sum_ij rho_ij |i>|j>`.
pub fn vectorize(m: &CMat) -> Vec<C64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Inverse of [`vectorize`] for a square matrix of dimension `d`.
pub fn unvectorize(v: &[C64], d: usize) -> Result<CMat> {
    if v.len() != d * d {
        return Err(CoreError::ShapeMismatch {
            context: "unvectorize",
            expected: format!("{} entries", d * d),
            got: format!("{}", v.len()),
        });
    }
    Ok(CMat::from_row_slice(d, d, v))
}

/// Transfer matrix `T = sum_l K_l (x) K_l*` acting on row-major vectorized
/// density matrices: `T |rho> = |E(rho)>`.
pub fn transfer_matrix(ch: &Channel) -> CMat {
    let mut t = CMat::zeros(ch.dim_out * ch.dim_out, ch.dim_in * ch.dim_in);
    for k in &ch.kraus {
        t += kron(k, &k.map(|z| z.conj()));
    }
    t
}

/// Stochastic matrix `S_ij = sum_l |(K_l)_ij|^2`.
///
/// Columns sum to one exactly when the channel is trace preserving; for a
/// unitary (or any mixture of unitaries) the matrix is doubly stochastic.
pub fn stochastic_matrix(ch: &Channel) -> RMat {
    let mut s = RMat::zeros(ch.dim_out, ch.dim_in);
    for k in &ch.kraus {
        for i in 0..ch.dim_out {
            for j in 0..ch.dim_in {
                s[(i, j)] += k[(i, j)].norm_sqr();
            }
        }
    }
    s
}
