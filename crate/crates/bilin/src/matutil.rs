//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSD_TOL: f64 = 1e-9;
pub const SQRT_TOL: f64 = 1e-9;

/// Symmetric matrix, stored already symmetrized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Accepts `m` when its asymmetry is within `tol_sym` relative to its largest entry.
    pub fn new(m: DMatrix<f64>, tol_sym: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimMismatch(format!(
                "{}x{} is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = 1.0 + m.amax();
        let asym = (&m - m.transpose()).amax();
        if asym > tol_sym * scale {
            return Err(Error::BadParam(format!(
                "asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        Ok(Self::symmetrize(m))
    }

    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        SymMatrix((&m + m.transpose()) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Ascending eigenvalues and matching eigenvectors.
    pub fn eigh(&self) -> (DVector<f64>, DMatrix<f64>) {
        eigh(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigh().0[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let (w, _) = self.eigh();
        w[w.len() - 1]
    }
}

/// He(A) = A + Aᵀ.
pub fn he(a: &DMatrix<f64>) -> DMatrix<f64> {
    a + a.transpose()
}

/// Symmetric eigendecomposition sorted ascending.
pub fn eigh(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let w = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut v = DMatrix::zeros(n, n);
    for (j, &i) in idx.iter().enumerate() {
        v.set_column(j, &eig.eigenvectors.column(i));
    }
    (w, v)
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    let (w, _) = eigh(m);
    if w.is_empty() {
        f64::NEG_INFINITY
    } else {
        w[w.len() - 1]
    }
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let (w, _) = eigh(m);
    if w.is_empty() {
        f64::INFINITY
    } else {
        w[0]
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

/// I_m ⊗ x as an (m·n)×m matrix.
pub fn kron_eye_vec(m: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(m * n, m);
    for k in 0..m {
        out.view_mut((k * n, k), (n, 1)).copy_from(x);
    }
    out
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Symmetric PSD square root. Eigenvalues down to −PSD_TOL·‖M‖ are clamped to zero.
pub fn sqrtm_psd(m: &SymMatrix) -> Result<SymMatrix> {
    psd_power(m.as_matrix(), 0.5).map(SymMatrix)
}

/// Inverse square root of a positive definite matrix.
pub fn inv_sqrtm_pd(m: &SymMatrix) -> Result<SymMatrix> {
    let (w, v) = m.eigh();
    if w[0] <= 0.0 {
        return Err(Error::NotPsd(w[0]));
    }
    let d = DMatrix::from_diagonal(&w.map(|x| x.powf(-0.5)));
    Ok(SymMatrix::symmetrize(&v * d * v.transpose()))
}

fn psd_power(m: &DMatrix<f64>, p: f64) -> Result<DMatrix<f64>> {
    let (w, v) = eigh(m);
    if w.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm = w.amax();
    if w[0] < -PSD_TOL * norm {
        return Err(Error::NotPsd(w[0]));
    }
    let d = DMatrix::from_diagonal(&w.map(|x| x.max(0.0).powf(p)));
    let r = &v * d * v.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

pub fn is_psd(m: &SymMatrix, strict: bool) -> bool {
    is_psd_tol(m.as_matrix(), strict, PSD_TOL)
}

pub fn is_psd_tol(m: &DMatrix<f64>, strict: bool, tol: f64) -> bool {
    let (w, _) = eigh(m);
    if w.is_empty() {
        return !strict;
    }
    let scale = tol * (1.0 + w.amax());
    if strict {
        w[0] > scale
    } else {
        w[0] >= -scale
    }
}

/// √det(P), computed from eigenvalues.
pub fn ellipsoid_volume_proxy(p: &SymMatrix) -> Result<f64> {
    let (w, _) = p.eigh();
    if w[0] <= 0.0 {
        return Err(Error::NotPsd(w[0]));
    }
    Ok(w.iter().map(|x| x.sqrt()).product())
}

/// 2·λmax(P)^{1/2}.
pub fn ellipsoid_diameter(p: &SymMatrix) -> Result<f64> {
    let (w, _) = p.eigh();
    if w[0] <= 0.0 {
        return Err(Error::NotPsd(w[0]));
    }
    Ok(2.0 * w[w.len() - 1].sqrt())
}

/// The set {x : (x − c)ᵀ P⁻¹ (x − c) ≤ level}.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: SymMatrix,
    pub level: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: SymMatrix, level: f64) -> Result<Self> {
        if center.len() != shape.dim() {
            return Err(Error::DimMismatch("ellipsoid center vs shape".into()));
        }
        if !is_psd(&shape, true) {
            return Err(Error::NotPsd(shape.min_eigenvalue()));
        }
        let chol = nalgebra::Cholesky::new(shape.as_matrix().clone())
            .ok_or(Error::NotPsd(shape.min_eigenvalue()))?;
        Ok(Ellipsoid {
            center,
            shape,
            level,
            chol,
        })
    }

    /// (x − c)ᵀ P⁻¹ (x − c).
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.center;
        r.dot(&self.chol.solve(&r))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.value(x) <= self.level
    }
}

/// Solve P X = B for symmetric positive definite P, falling back to LU.
pub fn solve_spd(p: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match nalgebra::Cholesky::new(p.clone()) {
        Some(c) => Some(c.solve(b)),
        None => p.clone().lu().solve(b),
    }
}

pub fn vec_norm_max(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Stack matrices vertically; all must share a column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Assemble a symmetric matrix from its lower block triangle.
///
/// `lower[i]` holds blocks (i, 0..=i); `None` means zero. Block sizes come from `sizes`.
pub fn sym_from_lower(sizes: &[usize], lower: &[Vec<Option<DMatrix<f64>>>]) -> DMatrix<f64> {
    let total: usize = sizes.iter().sum();
    let offs: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let mut out = DMatrix::zeros(total, total);
    for (i, row) in lower.iter().enumerate() {
        for (j, blk) in row.iter().enumerate() {
            let Some(b) = blk else { continue };
            assert_eq!(
                (b.nrows(), b.ncols()),
                (sizes[i], sizes[j]),
                "block ({i},{j}) has wrong shape"
            );
            out.view_mut((offs[i], offs[j]), (sizes[i], sizes[j]))
                .copy_from(b);
            if i != j {
                out.view_mut((offs[j], offs[i]), (sizes[j], sizes[i]))
                    .copy_from(&b.transpose());
            }
        }
    }
    (&out + out.transpose()) * 0.5
}
