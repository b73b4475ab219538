//! Matrix product states over open, projected, and periodic boundaries.
//!
//! Site `k` of an `N`-site state holds `d` matrices of shape
//! `chi_{k+1} x chi_k`; the amplitude of a configuration is the right-to-left
//! product `T_{N-1}^{i_{N-1}} ... T_0^{i_0}` closed off by the boundary.
//! Site 0 therefore sits rightmost in the matrix product while being the most
//! significant digit of the statevector index. With this orientation the
//! right-canonical condition `sum_i T^dag T = 1` says each site is an isometry
//! from its input bond into (physical x output bond), which is exactly the
//! trace-preservation condition of the site read as a channel on the bond.

use crate::caps::{checked_pow, DeskCaps};
use crate::error::{CoreError, Result};
use crate::matrix::{
    c64, complete_to_unitary, deviation_from_identity, svd_rank, thin_svd, CMat, CVec, C64,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Default relative singular-value cutoff for rank decisions.
pub const RANK_TOL: f64 = 1e-12;
/// Deviation below which a site counts as an isometry for padding purposes.
const ISOMETRY_TOL: f64 = 1e-8;

/// How the open bond indices of the matrix product are closed.
#[derive(Debug, Clone)]
pub enum Boundary {
    /// `chi_0 = chi_N = 1`; the product itself is the amplitude.
    Vector,
    /// Amplitude `sum_{b,a} right_b [product]_{b,a} left_a`; `right` is
    /// applied as written, without conjugation.
    Projected { left: CVec, right: CVec },
    /// Amplitude is the trace of the product; requires `chi_0 = chi_N`.
    Periodic,
}

/// A matrix product state.
#[derive(Debug, Clone)]
pub struct Mps {
    d: usize,
    /// `tensors[k][i]` has shape `chi_{k+1} x chi_k`.
    tensors: Vec<Vec<CMat>>,
    boundary: Boundary,
}

impl Mps {
    /// Validates shapes: every site holds `d` matrices, adjacent bonds agree,
    /// and the boundary fits the outer bonds.
    pub fn new(d: usize, tensors: Vec<Vec<CMat>>, boundary: Boundary) -> Result<Self> {
        if d < 2 {
            return Err(CoreError::InvalidInput {
                context: "Mps::new",
                detail: format!("physical dimension {d} must be at least 2"),
            });
        }
        if tensors.is_empty() {
            return Err(CoreError::InvalidInput {
                context: "Mps::new",
                detail: "no sites".into(),
            });
        }
        for (k, site) in tensors.iter().enumerate() {
            if site.len() != d {
                return Err(CoreError::ShapeMismatch {
                    context: "Mps::new",
                    expected: format!("{d} matrices per site"),
                    got: format!("site {k} has {}", site.len()),
                });
            }
            let shape = site[0].shape();
            if shape.0 == 0 || shape.1 == 0 {
                return Err(CoreError::ShapeMismatch {
                    context: "Mps::new",
                    expected: "nonzero bond dimensions".into(),
                    got: format!("site {k} is {}x{}", shape.0, shape.1),
                });
            }
            for (i, t) in site.iter().enumerate() {
                if t.shape() != shape {
                    return Err(CoreError::ShapeMismatch {
                        context: "Mps::new",
                        expected: format!("{}x{}", shape.0, shape.1),
                        got: format!("site {k} level {i} is {}x{}", t.nrows(), t.ncols()),
                    });
                }
            }
            if k + 1 < tensors.len() {
                let next_cols = tensors[k + 1][0].ncols();
                if next_cols != shape.0 {
                    return Err(CoreError::ShapeMismatch {
                        context: "Mps::new",
                        expected: format!("site {} input bond {}", k + 1, shape.0),
                        got: format!("{next_cols}"),
                    });
                }
            }
        }
        let chi_first = tensors[0][0].ncols();
        let chi_last = tensors.last().unwrap()[0].nrows();
        match &boundary {
            Boundary::Vector => {
                if chi_first != 1 || chi_last != 1 {
                    return Err(CoreError::ShapeMismatch {
                        context: "Mps::new",
                        expected: "outer bonds of dimension 1".into(),
                        got: format!("chi_0 = {chi_first}, chi_N = {chi_last}"),
                    });
                }
            }
            Boundary::Projected { left, right } => {
                if left.len() != chi_first || right.len() != chi_last {
                    return Err(CoreError::ShapeMismatch {
                        context: "Mps::new",
                        expected: format!("boundary vectors of length {chi_first} and {chi_last}"),
                        got: format!("{} and {}", left.len(), right.len()),
                    });
                }
            }
            Boundary::Periodic => {
                if chi_first != chi_last {
                    return Err(CoreError::ShapeMismatch {
                        context: "Mps::new",
                        expected: "matching wrap bonds".into(),
                        got: format!("chi_0 = {chi_first}, chi_N = {chi_last}"),
                    });
                }
            }
        }
        Ok(Mps { d, tensors, boundary })
    }

    pub fn physical_dim(&self) -> usize {
        self.d
    }

    pub fn n_sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn boundary(&self) -> &Boundary {
        &self.boundary
    }

    /// The `d` matrices at site `k`.
    pub fn site(&self, k: usize) -> &[CMat] {
        &self.tensors[k]
    }

    /// Bond dimensions `chi_0 ..= chi_N` (length `N + 1`).
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.tensors.len() + 1);
        dims.push(self.tensors[0][0].ncols());
        for site in &self.tensors {
            dims.push(site[0].nrows());
        }
        dims
    }

    /// Stacks site `k` into the `(d * chi_{k+1}) x chi_k` matrix whose block
    /// row `i` is `T_k^i`.
    pub fn stacked_site(&self, k: usize) -> CMat {
        let rows = self.tensors[k][0].nrows();
        let cols = self.tensors[k][0].ncols();
        let mut v = CMat::zeros(self.d * rows, cols);
        for (i, t) in self.tensors[k].iter().enumerate() {
            v.view_mut((i * rows, 0), (rows, cols)).copy_from(t);
        }
        v
    }

    /// Site `k` read as a channel on the bond space, with one Kraus operator
    /// per physical level.
    pub fn site_channel(&self, k: usize) -> crate::channels::Channel {
        crate::channels::Channel::new(self.tensors[k].clone())
            .expect("validated site tensors form a channel")
    }

    /// Largest deviation of `sum_i T^dag T` from the identity over all sites.
    pub fn right_canonical_deviation(&self) -> f64 {
        (0..self.n_sites())
            .map(|k| self.site_canonical_deviation(k))
            .fold(0.0, f64::max)
    }

    /// Deviation of site `k` alone.
    pub fn site_canonical_deviation(&self, k: usize) -> f64 {
        let v = self.stacked_site(k);
        deviation_from_identity(&(v.adjoint() * &v))
    }

    /// Errors with the first offending site if any deviation exceeds `tol`.
    pub fn validate_right_canonical(&self, tol: f64) -> Result<()> {
        for k in 0..self.n_sites() {
            let dev = self.site_canonical_deviation(k);
            if dev > tol {
                return Err(CoreError::NotCanonical { site: k, deviation: dev, tol });
            }
        }
        Ok(())
    }

    /// Amplitude of one configuration; `indices[k]` is the physical level of
    /// site `k`.
    pub fn amplitude(&self, indices: &[usize]) -> Result<C64> {
        let n = self.n_sites();
        if indices.len() != n {
            return Err(CoreError::ShapeMismatch {
                context: "Mps::amplitude",
                expected: format!("{n} indices"),
                got: format!("{}", indices.len()),
            });
        }
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.d {
                return Err(CoreError::InvalidInput {
                    context: "Mps::amplitude",
                    detail: format!("index {i} at site {k} exceeds physical dimension"),
                });
            }
        }
        match &self.boundary {
            Boundary::Periodic => {
                let chi = self.tensors[0][0].ncols();
                let mut m = crate::matrix::identity_c(chi);
                for (k, &i) in indices.iter().enumerate() {
                    m = &self.tensors[k][i] * m;
                }
                Ok(m.diagonal().iter().sum())
            }
            _ => {
                let mut v = match &self.boundary {
                    Boundary::Vector => CVec::from_element(1, c64(1.0, 0.0)),
                    Boundary::Projected { left, .. } => left.clone(),
                    Boundary::Periodic => unreachable!(),
                };
                for (k, &i) in indices.iter().enumerate() {
                    v = &self.tensors[k][i] * v;
                }
                match &self.boundary {
                    Boundary::Vector => Ok(v[0]),
                    Boundary::Projected { right, .. } => {
                        Ok(right.iter().zip(v.iter()).map(|(r, x)| r * x).sum())
                    }
                    Boundary::Periodic => unreachable!(),
                }
            }
        }
    }

    /// Contracts the full state into a dense vector indexed with site 0 as
    /// the most significant digit.
    pub fn to_statevector(&self, caps: &DeskCaps) -> Result<Vec<C64>> {
        let n = self.n_sites();
        let total = checked_pow(self.d, n);
        caps.check_statevector(total, "Mps::to_statevector")?;
        match &self.boundary {
            Boundary::Periodic => {
                let chi = self.tensors[0][0].ncols();
                let mut cur = vec![crate::matrix::identity_c(chi)];
                for site in &self.tensors {
                    let mut next = Vec::with_capacity(cur.len() * self.d);
                    for m in &cur {
                        for t in site {
                            next.push(t * m);
                        }
                    }
                    cur = next;
                }
                Ok(cur.iter().map(|m| m.diagonal().iter().sum()).collect())
            }
            _ => {
                let start = match &self.boundary {
                    Boundary::Vector => CVec::from_element(1, c64(1.0, 0.0)),
                    Boundary::Projected { left, .. } => left.clone(),
                    Boundary::Periodic => unreachable!(),
                };
                let mut cur = vec![start];
                for site in &self.tensors {
                    let mut next = Vec::with_capacity(cur.len() * self.d);
                    for v in &cur {
                        for t in site {
                            next.push(t * v);
                        }
                    }
                    cur = next;
                }
                Ok(match &self.boundary {
                    Boundary::Vector => cur.iter().map(|v| v[0]).collect(),
                    Boundary::Projected { right, .. } => cur
                        .iter()
                        .map(|v| right.iter().zip(v.iter()).map(|(r, x)| r * x).sum())
                        .collect(),
                    Boundary::Periodic => unreachable!(),
                })
            }
        }
    }

    /// Exact matrix product form of a dense state via successive thin
    /// factorizations from the last site backwards. The result has vector
    /// boundary, is right canonical on every site but possibly the first
    /// (which carries the norm), and its bonds respect
    /// [`bond_dim_bound`]. Singular values below `rank_tol` times the largest
    /// one at each cut are dropped.
    pub fn from_statevector(
        d: usize,
        psi: &[C64],
        rank_tol: f64,
        caps: &DeskCaps,
    ) -> Result<Mps> {
        if d < 2 {
            return Err(CoreError::InvalidInput {
                context: "Mps::from_statevector",
                detail: format!("physical dimension {d} must be at least 2"),
            });
        }
        let mut n = 0usize;
        let mut len = 1usize;
        while len < psi.len() {
            len *= d;
            n += 1;
        }
        if len != psi.len() || n == 0 {
            return Err(CoreError::InvalidInput {
                context: "Mps::from_statevector",
                detail: format!("length {} is not a positive power of {d}", psi.len()),
            });
        }
        caps.check_statevector(psi.len() as u128, "Mps::from_statevector")?;
        if crate::matrix::norm_sq(psi) == 0.0 {
            return Err(CoreError::InvalidInput {
                context: "Mps::from_statevector",
                detail: "zero state".into(),
            });
        }

        // M holds the not-yet-factored left part, rows indexed by the first k
        // digits, columns by (digit k, bond). Peel one site per pass.
        let mut tensors: Vec<Vec<CMat>> = vec![Vec::new(); n];
        let mut m = CMat::from_fn(psi.len() / d, d, |row, i| psi[row * d + i]);
        for k in (1..n).rev() {
            let svd = thin_svd(&m)?;
            let r = svd_rank(&svd.s, rank_tol);
            let r_next = m.ncols() / d;
            // Cores from the right factor: C^i[b, a] = V^dag[b, i * r_next + a],
            // transposed into the right-to-left product convention.
            let mut site = Vec::with_capacity(d);
            for i in 0..d {
                site.push(CMat::from_fn(r_next, r, |a, b| svd.v_t[(b, i * r_next + a)]));
            }
            tensors[k] = site;
            let rows = m.nrows() / d;
            let us = CMat::from_fn(m.nrows(), r, |row, b| svd.u[(row, b)] * c64(svd.s[b], 0.0));
            m = CMat::from_fn(rows, d * r, |row, col| {
                let (i, b) = (col / r, col % r);
                us[(row * d + i, b)]
            });
        }
        let r1 = m.ncols() / d;
        let mut site0 = Vec::with_capacity(d);
        for i in 0..d {
            site0.push(CMat::from_fn(r1, 1, |a, _| m[(0, i * r1 + a)]));
        }
        tensors[0] = site0;
        Mps::new(d, tensors, Boundary::Vector)
    }

    /// Rewrites a periodic state as a projected one by carrying the wrap bond
    /// alongside every site: each tensor becomes `T (x) 1`, and the boundary
    /// vectors are the (normalized) maximally entangled pairing of the two
    /// copies, which re-creates the trace.
    pub fn pbc_to_obc(&self) -> Result<Mps> {
        let Boundary::Periodic = self.boundary else {
            return Err(CoreError::InvalidInput {
                context: "Mps::pbc_to_obc",
                detail: "boundary is not periodic".into(),
            });
        };
        let chi = self.tensors[0][0].ncols();
        let eye = crate::matrix::identity_c(chi);
        let tensors: Vec<Vec<CMat>> = self
            .tensors
            .iter()
            .map(|site| site.iter().map(|t| crate::matrix::kron(t, &eye)).collect())
            .collect();
        let scale = (chi as f64).sqrt();
        let mut left = CVec::zeros(chi * chi);
        let mut right = CVec::zeros(chi * chi);
        for a in 0..chi {
            left[a * chi + a] = c64(1.0 / scale, 0.0);
            right[a * chi + a] = c64(scale, 0.0);
        }
        Mps::new(self.d, tensors, Boundary::Projected { left, right })
    }

    /// Re-expresses a vector-boundary state with explicit (trivial) boundary
    /// vectors so that bonds 0 and N become paddable.
    pub fn to_projected(&self) -> Result<Mps> {
        match &self.boundary {
            Boundary::Vector => Mps::new(
                self.d,
                self.tensors.clone(),
                Boundary::Projected {
                    left: CVec::from_element(1, c64(1.0, 0.0)),
                    right: CVec::from_element(1, c64(1.0, 0.0)),
                },
            ),
            Boundary::Projected { .. } => Ok(self.clone()),
            Boundary::Periodic => self.pbc_to_obc(),
        }
    }

    /// Grows bond `bond` (between sites `bond - 1` and `bond`) to `new_dim`
    /// without changing any amplitude.
    ///
    /// The site left of the bond gets zero rows and boundary vectors get zero
    /// entries, so the new bond levels are never populated. The site right of
    /// the bond gets new columns: orthonormal completions when the site was an
    /// isometry and the stacked space has room, zeros otherwise, keeping
    /// right-canonical sites right canonical.
    pub fn pad_bond(&mut self, bond: usize, new_dim: usize) -> Result<()> {
        let n = self.n_sites();
        if bond > n {
            return Err(CoreError::InvalidInput {
                context: "Mps::pad_bond",
                detail: format!("bond {bond} out of range for {n} sites"),
            });
        }
        let dims = self.bond_dims();
        let cur = dims[bond];
        if new_dim < cur {
            return Err(CoreError::InvalidInput {
                context: "Mps::pad_bond",
                detail: format!("cannot shrink bond {bond} from {cur} to {new_dim}"),
            });
        }
        if new_dim == cur {
            return Ok(());
        }
        if bond == 0 || bond == n {
            match &mut self.boundary {
                Boundary::Projected { left, right } => {
                    let grow = |v: &CVec| {
                        let mut w = CVec::zeros(new_dim);
                        w.rows_mut(0, v.len()).copy_from(v);
                        w
                    };
                    if bond == 0 {
                        *left = grow(left);
                    } else {
                        *right = grow(right);
                    }
                }
                _ => {
                    return Err(CoreError::InvalidInput {
                        context: "Mps::pad_bond",
                        detail: format!("bond {bond} is fixed by the boundary kind"),
                    });
                }
            }
        }
        // Site right of the bond: new input columns.
        if bond < n {
            let rows = self.tensors[bond][0].nrows();
            let stacked = self.stacked_site(bond);
            let was_isometry =
                deviation_from_identity(&(stacked.adjoint() * &stacked)) <= ISOMETRY_TOL;
            let extended = if was_isometry && new_dim <= self.d * rows {
                let full = complete_to_unitary(&stacked)?;
                full.columns(0, new_dim).into_owned()
            } else {
                let mut z = CMat::zeros(self.d * rows, new_dim);
                z.view_mut((0, 0), (self.d * rows, cur)).copy_from(&stacked);
                z
            };
            for i in 0..self.d {
                self.tensors[bond][i] = extended.view((i * rows, 0), (rows, new_dim)).into_owned();
            }
        }
        // Site left of the bond: new zero output rows.
        if bond >= 1 {
            let k = bond - 1;
            let cols = self.tensors[k][0].ncols();
            for t in self.tensors[k].iter_mut() {
                let mut z = CMat::zeros(new_dim, cols);
                z.view_mut((0, 0), (cur, cols)).copy_from(t);
                *t = z;
            }
        }
        Ok(())
    }

    /// Pads every bond, including the boundary ones, to the same dimension.
    /// Requires a projected boundary.
    pub fn pad_to_uniform(&mut self, chi: usize) -> Result<()> {
        if !matches!(self.boundary, Boundary::Projected { .. }) {
            return Err(CoreError::InvalidInput {
                context: "Mps::pad_to_uniform",
                detail: "uniform padding needs a projected boundary".into(),
            });
        }
        let n = self.n_sites();
        // Last bond first: growing a site's output rows before its input
        // columns keeps room for orthonormal completion at every site.
        for bond in (0..=n).rev() {
            self.pad_bond(bond, chi)?;
        }
        Ok(())
    }
}

/// Exact upper bound `min(d^k, d^{N-k})` on the rank of bond `k` of any
/// `N`-site state, saturated at `usize::MAX` for large exponents.
pub fn bond_dim_bound(d: usize, n_sites: usize, bond: usize) -> usize {
    let pow = |e: usize| checked_pow(d, e).min(usize::MAX as u128) as usize;
    pow(bond.min(n_sites - bond))
}

/// Packs per-site digits into a statevector index, site 0 most significant.
pub fn statevector_index(d: usize, digits: &[usize]) -> usize {
    digits.iter().fold(0, |acc, &i| acc * d + i)
}

/// Inverse of [`statevector_index`].
pub fn index_digits(d: usize, n_sites: usize, index: usize) -> Vec<usize> {
    let mut digits = vec![0; n_sites];
    let mut rem = index;
    for k in (0..n_sites).rev() {
        digits[k] = rem % d;
        rem /= d;
    }
    digits
}

/// Draws a right-canonical state with bonds `min(chi_max, d^k, d^{N-k})` by
/// orthonormalizing complex Gaussian site matrices. The result is normalized.
pub fn random_right_canonical<R: Rng + ?Sized>(
    d: usize,
    n_sites: usize,
    chi_max: usize,
    rng: &mut R,
) -> Result<Mps> {
    if n_sites == 0 || chi_max == 0 {
        return Err(CoreError::InvalidInput {
            context: "random_right_canonical",
            detail: "empty shape".into(),
        });
    }
    let mut tensors = Vec::with_capacity(n_sites);
    for k in 0..n_sites {
        let chi_in = chi_max.min(bond_dim_bound(d, n_sites, k));
        let chi_out = chi_max.min(bond_dim_bound(d, n_sites, k + 1));
        let g = CMat::from_fn(d * chi_out, chi_in, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            c64(re, im)
        });
        // Thin QR projects the Gaussian block onto a Haar-like isometry.
        let qr = g.qr();
        let q = qr.q();
        let mut site = Vec::with_capacity(d);
        for i in 0..d {
            site.push(q.view((i * chi_out, 0), (chi_out, chi_in)).into_owned());
        }
        tensors.push(site);
    }
    Mps::new(d, tensors, Boundary::Vector)
}
