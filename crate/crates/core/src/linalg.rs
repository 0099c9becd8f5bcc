//! Small dense linear algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalues below this are treated as zero when taking square roots.
pub const EIGEN_CLIP: f64 = 1e-12;

/// Relative tolerance for negative eigenvalues before a matrix is declared
/// not positive semidefinite.
pub const PSD_TOL: f64 = 1e-8;

/// Condition number above which a covariance is reported as near singular.
pub const COND_WARN: f64 = 1e8;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Result of a symmetric PSD square root.
#[derive(Debug, Clone)]
pub struct PsdSqrt {
    pub sqrt: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub condition: f64,
}

/// Symmetric square root `C^{1/2}` of a covariance matrix.
///
/// Returns `Err(min_eigenvalue)` when `C` has an eigenvalue below
/// `-PSD_TOL * max(1, |λ|_max)`; small negative values are clipped to zero.
pub fn psd_sqrt(c: &DMatrix<f64>) -> std::result::Result<PsdSqrt, f64> {
    let sym = symmetrize(c);
    let eig = SymmetricEigen::new(sym);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() || !max_abs.is_finite() {
        return Err(f64::NAN);
    }
    if min < -PSD_TOL * max_abs.max(1.0) {
        return Err(min);
    }
    let roots = eig
        .eigenvalues
        .map(|v| if v < EIGEN_CLIP { 0.0 } else { v.sqrt() });
    let q = &eig.eigenvectors;
    let sqrt = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let condition = if min <= 0.0 {
        f64::INFINITY
    } else {
        max_abs / min
    };
    Ok(PsdSqrt {
        sqrt,
        min_eigenvalue: min,
        condition,
    })
}

/// Square matrix of `b x b` blocks that grows by one block row and column at
/// a time. Indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    block: usize,
    n: usize,
    data: DMatrix<f64>,
}

impl BlockMatrix {
    pub fn new(block: usize) -> Self {
        BlockMatrix {
            block,
            n: 0,
            data: DMatrix::zeros(0, 0),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    /// Number of block rows (and columns).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Append one zero block row and column.
    pub fn grow(&mut self) {
        let b = self.block;
        let size = (self.n + 1) * b;
        let old = std::mem::replace(&mut self.data, DMatrix::zeros(0, 0));
        self.data = old.resize(size, size, 0.0);
        self.n += 1;
    }

    pub fn get(&self, r: usize, s: usize) -> DMatrix<f64> {
        assert!(r < self.n && s < self.n, "block ({r}, {s}) out of range");
        let b = self.block;
        self.data.view((r * b, s * b), (b, b)).into_owned()
    }

    pub fn set(&mut self, r: usize, s: usize, m: &DMatrix<f64>) {
        assert!(r < self.n && s < self.n, "block ({r}, {s}) out of range");
        let b = self.block;
        assert_eq!(m.shape(), (b, b));
        self.data.view_mut((r * b, s * b), (b, b)).copy_from(m);
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }
}
