//! Dense complex matrix helpers shared by every module.
//!
//! Matrices are `nalgebra` heap-allocated matrices over `Complex64`. All
//! public constructors in this crate take row-major entry order; `nalgebra`'s
//! internal storage is an implementation detail.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CoreError, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Conjugate transpose.
pub fn dagger(m: &CMat) -> CMat {
    m.adjoint()
}

/// Largest entry modulus of `m`.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry modulus of `a - b`; the matrices must have equal shape.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Deviation of `m` from the identity, as the largest entry modulus.
pub fn deviation_from_identity(m: &CMat) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut dev: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let target = if i == j && i < n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            dev = dev.max((m[(i, j)] - target).norm());
        }
    }
    dev
}

/// Deviation of `u` from unitarity: max of `|u†u - 1|` and `|uu† - 1|` entries.
pub fn unitarity_deviation(u: &CMat) -> f64 {
    if u.nrows() != u.ncols() {
        return f64::INFINITY;
    }
    let d1 = deviation_from_identity(&(dagger(u) * u));
    let d2 = deviation_from_identity(&(u * dagger(u)));
    d1.max(d2)
}

/// Deviation of `v` from being an isometry (orthonormal columns).
pub fn isometry_deviation(v: &CMat) -> f64 {
    deviation_from_identity(&(dagger(v) * v))
}

/// Kronecker product, row index of `a` slower.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn identity_c(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Basis column vector `e_i` of dimension `n`.
pub fn basis_vec(n: usize, i: usize) -> CVec {
    let mut v = CVec::zeros(n);
    v[i] = C64::new(1.0, 0.0);
    v
}

/// Squared two-norm of a state vector given as a slice.
pub fn norm_sq(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Overlap magnitude `|<a|b>| / (|a||b|)`; 0 when either vector vanishes.
pub fn fidelity(a: &[C64], b: &[C64]) -> f64 {
    assert_eq!(a.len(), b.len(), "fidelity dimension mismatch");
    let na = norm_sq(a).sqrt();
    let nb = norm_sq(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let ip: C64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    ip.norm() / (na * nb)
}

/// Result of a deterministic thin SVD `m = u * diag(s) * v_t`.
///
/// The phase gauge is fixed: in every column of `u` the entry of largest
/// modulus (lowest index on ties) is real positive, with the compensating
/// phase folded into the matching row of `v_t`. Singular values are sorted
/// descending by `nalgebra`.
pub struct ThinSvd {
    pub u: CMat,
    pub s: RVec,
    pub v_t: CMat,
}

pub fn thin_svd(m: &CMat) -> Result<ThinSvd> {
    let svd = m.clone().svd(true, true);
    let mut u = svd.u.ok_or_else(|| CoreError::Internal {
        detail: "svd did not return u".into(),
    })?;
    let mut v_t = svd.v_t.ok_or_else(|| CoreError::Internal {
        detail: "svd did not return v_t".into(),
    })?;
    let s = svd.singular_values;
    for k in 0..u.ncols() {
        let mut best = 0usize;
        let mut best_mod = 0.0f64;
        for i in 0..u.nrows() {
            let a = u[(i, k)].norm();
            if a > best_mod + 1e-14 {
                best_mod = a;
                best = i;
            }
        }
        if best_mod > 0.0 {
            let alpha = u[(best, k)].conj() / best_mod;
            for i in 0..u.nrows() {
                u[(i, k)] *= alpha;
            }
            if k < v_t.nrows() {
                let alpha_c = alpha.conj();
                for j in 0..v_t.ncols() {
                    v_t[(k, j)] *= alpha_c;
                }
            }
        }
    }
    Ok(ThinSvd { u, s, v_t })
}

/// Number of singular values above `rel_tol * s_max`.
pub fn svd_rank(s: &RVec, rel_tol: f64) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

/// Extends a matrix with orthonormal columns to a full unitary.
///
/// The appended columns are produced by modified Gram-Schmidt over the
/// canonical basis vectors in index order, skipping candidates whose residual
/// is numerically degenerate, so the completion is deterministic. The first
/// `v.ncols()` columns of the result equal `v` exactly.
pub fn complete_to_unitary(v: &CMat) -> Result<CMat> {
    let rows = v.nrows();
    let cols = v.ncols();
    if cols > rows {
        return Err(CoreError::ShapeMismatch {
            context: "complete_to_unitary",
            expected: format!("cols <= rows, rows = {rows}"),
            got: format!("cols = {cols}"),
        });
    }
    let dev = isometry_deviation(v);
    if dev > 1e-8 {
        return Err(CoreError::InvalidInput {
            context: "complete_to_unitary",
            detail: format!("input columns are not orthonormal (deviation {dev:.3e})"),
        });
    }
    let mut basis: Vec<CVec> = (0..cols).map(|j| v.column(j).into_owned()).collect();
    for j in 0..rows {
        if basis.len() == rows {
            break;
        }
        let mut cand = basis_vec(rows, j);
        // Two orthogonalization passes keep the result orthonormal even for
        // nearly dependent candidates.
        for _ in 0..2 {
            for b in &basis {
                let ip: C64 = b.iter().zip(cand.iter()).map(|(x, y)| x.conj() * y).sum();
                cand -= b * ip;
            }
        }
        let n = cand.norm();
        if n > 1e-8 {
            basis.push(cand / C64::new(n, 0.0));
        }
    }
    if basis.len() != rows {
        return Err(CoreError::Internal {
            detail: "unitary completion ran out of candidate directions".into(),
        });
    }
    let mut u = CMat::zeros(rows, rows);
    for (j, b) in basis.iter().enumerate() {
        u.set_column(j, b);
    }
    Ok(u)
}

/// Builds a real matrix from explicit rows; rows must share one length.
pub fn rmat_from_rows(rows: &[&[f64]]) -> RMat {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    assert!(rows.iter().all(|r| r.len() == ncols), "ragged rows");
    RMat::from_fn(nrows, ncols, |i, j| rows[i][j])
}

/// Builds a complex matrix from row-major `[re, im]` entries.
pub fn from_rows(rows: usize, cols: usize, data: &[C64]) -> Result<CMat> {
    if data.len() != rows * cols {
        return Err(CoreError::ShapeMismatch {
            context: "from_rows",
            expected: format!("{} entries", rows * cols),
            got: format!("{}", data.len()),
        });
    }
    Ok(CMat::from_row_slice(rows, cols, data))
}
