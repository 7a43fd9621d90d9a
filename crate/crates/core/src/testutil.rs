//! Helpers shared by unit tests.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// `M (MᵀM)⁺ Mᵀ` through a symmetric eigendecomposition, independent of the
/// SVD path under test. Eigenvalues of `MᵀM` below `1e-12 · λ_max` are
/// dropped.
pub fn pinv_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), m.nrows());
    }
    let top = (m.transpose() * m).symmetric_eigen().eigenvalues.amax();
    pinv_projector_abs(m, 1e-12 * top)
}

/// As [`pinv_projector`] with an absolute eigenvalue threshold.
pub fn pinv_projector_abs(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), m.nrows());
    }
    let eig = (m.transpose() * m).symmetric_eigen();
    let inv = eig.eigenvalues.map(|l| if l > tol { 1.0 / l } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    m * pinv * m.transpose()
}
