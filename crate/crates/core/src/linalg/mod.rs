//! Dense matrix kernels: SVD-backed numerical rank, column-space bases and
//! the projections built from them.
//!
//! Projectors are never materialized. A [`ProjectorBasis`] holds a thin
//! orthonormal basis `Q` and applies `P[M] v = Q (Qᵀ v)` and
//! `P_N[M] v = v - Q (Qᵀ v)`.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod io;

/// A dense real matrix whose entries are all finite.
///
/// Storage is column-major (the nalgebra layout); the on-disk formats in
/// [`io`] are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    pub fn new(inner: DMatrix<f64>) -> Result<Self> {
        for c in 0..inner.ncols() {
            for r in 0..inner.nrows() {
                if !inner[(r, c)].is_finite() {
                    return Err(Error::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(DenseMatrix(inner))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::from_row_slice",
                rows * cols,
                data.len(),
            ));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        DenseMatrix(DMatrix::identity(n, n))
    }

    /// Wraps a matrix produced by arithmetic on already-validated inputs.
    /// Still checks finiteness; overflow during a computation is reported
    /// as a numerical failure rather than a data error.
    pub(crate) fn computed(inner: DMatrix<f64>, what: &str) -> Result<Self> {
        if inner.iter().all(|x| x.is_finite()) {
            Ok(DenseMatrix(inner))
        } else {
            Err(Error::Numerical(format!("{what} produced a non-finite value")))
        }
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for DenseMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl TryFrom<DMatrix<f64>> for DenseMatrix {
    type Error = Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        DenseMatrix::new(m)
    }
}

/// Singular-value cutoff used to decide numerical rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffCriterion {
    /// `½ · σ_max · ε · √(rows + cols + 1)`
    #[default]
    PressEtAl,
    /// `½ · ‖M‖_∞ · ε`, with `‖M‖_∞` the maximum absolute row sum.
    GolubVanLoan,
    /// `σ_max · ε`
    Lapack,
}

impl CutoffCriterion {
    pub const ALL: [CutoffCriterion; 3] = [
        CutoffCriterion::PressEtAl,
        CutoffCriterion::GolubVanLoan,
        CutoffCriterion::Lapack,
    ];

    pub fn cutoff(self, scale: MatrixScale, rows: usize, cols: usize) -> f64 {
        let eps = f64::EPSILON;
        match self {
            CutoffCriterion::PressEtAl => {
                0.5 * scale.sigma_max * eps * ((rows + cols + 1) as f64).sqrt()
            }
            CutoffCriterion::GolubVanLoan => 0.5 * scale.inf_norm * eps,
            CutoffCriterion::Lapack => scale.sigma_max * eps,
        }
    }
}

impl fmt::Display for CutoffCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CutoffCriterion::PressEtAl => "press",
            CutoffCriterion::GolubVanLoan => "golub",
            CutoffCriterion::Lapack => "lapack",
        })
    }
}

impl FromStr for CutoffCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "press" | "press_et_al" => Ok(CutoffCriterion::PressEtAl),
            "golub" | "golub_van_loan" => Ok(CutoffCriterion::GolubVanLoan),
            "lapack" => Ok(CutoffCriterion::Lapack),
            other => Err(Error::InvalidArgument(format!(
                "unknown cutoff criterion {other:?} (expected press, golub or lapack)"
            ))),
        }
    }
}

/// The two magnitudes the cutoff criteria are stated in.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatrixScale {
    pub sigma_max: f64,
    pub inf_norm: f64,
}

impl MatrixScale {
    pub fn of(m: &DMatrix<f64>) -> Result<Self> {
        Ok(MatrixScale {
            sigma_max: singular_values(m)?.iter().copied().fold(0.0, f64::max),
            inf_norm: inf_norm(m),
        })
    }

    pub fn max(self, other: MatrixScale) -> MatrixScale {
        MatrixScale {
            sigma_max: self.sigma_max.max(other.sigma_max),
            inf_norm: self.inf_norm.max(other.inf_norm),
        }
    }
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn svd_failed(m: &DMatrix<f64>) -> Error {
    Error::Numerical(format!("SVD of a {}x{} matrix did not converge", m.nrows(), m.ncols()))
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    to_faer(m).singular_values().map_err(|_| svd_failed(m))
}

/// Thin left singular vectors and the singular values, in matching order.
fn thin_svd_left(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = to_faer(m).thin_svd().map_err(|_| svd_failed(m))?;
    let u = svd.U();
    let s = svd.S().column_vector();
    let u = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]);
    Ok((u, (0..s.nrows()).map(|i| s[i]).collect()))
}

/// Number of singular values strictly above the criterion's cutoff, and
/// the cutoff itself. An empty matrix has rank 0 and cutoff 0.
pub fn numerical_rank(m: &DMatrix<f64>, criterion: CutoffCriterion) -> Result<(usize, f64)> {
    if m.is_empty() {
        return Ok((0, 0.0));
    }
    let sv = singular_values(m)?;
    let scale = MatrixScale {
        sigma_max: sv.iter().copied().fold(0.0, f64::max),
        inf_norm: inf_norm(m),
    };
    let cutoff = criterion.cutoff(scale, m.nrows(), m.ncols());
    Ok((sv.iter().filter(|&&s| s > cutoff).count(), cutoff))
}

/// Thin orthonormal basis of a numerical column space.
#[derive(Clone, Debug)]
pub struct ProjectorBasis {
    ambient_dim: usize,
    basis: DMatrix<f64>,
    cutoff_used: f64,
    criterion: CutoffCriterion,
    discarded: Vec<f64>,
    conditioning: f64,
}

impl ProjectorBasis {
    /// The rank-0 basis: `P` is zero and `P_N` is the identity.
    pub fn empty(ambient_dim: usize, criterion: CutoffCriterion) -> Self {
        ProjectorBasis {
            ambient_dim,
            basis: DMatrix::zeros(ambient_dim, 0),
            cutoff_used: 0.0,
            criterion,
            discarded: Vec::new(),
            conditioning: 1.0,
        }
    }

    /// Largest over smallest kept singular value of the matrix the basis
    /// was computed from; 1 for empty bases and for bases grown by
    /// [`extend_basis`]. The computed span is off by roughly
    /// `ε · conditioning` in angle.
    pub fn conditioning(&self) -> f64 {
        self.conditioning
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn cutoff_used(&self) -> f64 {
        self.cutoff_used
    }

    pub fn criterion(&self) -> CutoffCriterion {
        self.criterion
    }

    pub fn discarded_singular_values(&self) -> &[f64] {
        &self.discarded
    }

    /// Basis of the column space of `I_n ⊗ M` from a basis of `M`'s.
    pub fn kron_identity(&self, n: usize) -> ProjectorBasis {
        ProjectorBasis {
            ambient_dim: n * self.ambient_dim,
            basis: kron_identity(n, &self.basis),
            cutoff_used: self.cutoff_used,
            criterion: self.criterion,
            discarded: self.discarded.iter().copied().cycle().take(n * self.discarded.len()).collect(),
            conditioning: self.conditioning,
        }
    }

    fn check_len(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.ambient_dim {
            return Err(Error::shape(context, self.ambient_dim, len));
        }
        Ok(())
    }

    /// `Q (Qᵀ v)`
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v.len(), "project")?;
        if self.rank() == 0 {
            return Ok(DVector::zeros(v.len()));
        }
        Ok(&self.basis * (self.basis.transpose() * v))
    }

    /// `v - Q (Qᵀ v)`
    pub fn project_null(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.project(v)?;
        Ok(v - p)
    }

    /// Applies `P_N` to every column of `m`.
    pub fn project_null_columns(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_len(m.nrows(), "project_null_columns")?;
        Ok(null_project(&self.basis, m))
    }

    /// `‖Qᵀ v‖²`, the squared norm of the projection of `v`.
    pub fn projected_norm_sq(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_len(v.len(), "projected_norm_sq")?;
        if self.rank() == 0 {
            return Ok(0.0);
        }
        Ok((self.basis.transpose() * v).norm_squared())
    }
}

fn null_project(q: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    if q.ncols() == 0 || m.ncols() == 0 {
        return m.clone();
    }
    m - q * (q.transpose() * m)
}

/// Basis of the numerical column space of `m` at the criterion's rank.
pub fn column_space_basis(m: &DMatrix<f64>, criterion: CutoffCriterion) -> Result<ProjectorBasis> {
    let mut out = ProjectorBasis::empty(m.nrows(), criterion);
    if m.is_empty() {
        return Ok(out);
    }
    let (u, sv) = thin_svd_left(m)?;
    let scale = MatrixScale {
        sigma_max: sv.iter().copied().fold(0.0, f64::max),
        inf_norm: inf_norm(m),
    };
    let cutoff = criterion.cutoff(scale, m.nrows(), m.ncols());
    let (keep, discarded) = split_by_cutoff(&sv, cutoff);
    if let (Some(&first), Some(&last)) = (keep.first(), keep.last()) {
        out.conditioning = sv[first] / sv[last];
    }
    out.basis = select_columns(&u, &keep);
    out.cutoff_used = cutoff;
    out.discarded = discarded;
    Ok(out)
}

/// Indices of singular values above `cutoff`, ordered by decreasing value,
/// and the discarded values.
fn split_by_cutoff(sv: &[f64], cutoff: f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let keep = order.iter().copied().filter(|&i| sv[i] > cutoff).collect();
    let discarded = order
        .iter()
        .copied()
        .filter(|&i| sv[i] <= cutoff)
        .map(|i| sv[i])
        .collect();
    (keep, discarded)
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

/// Basis for `span(b) ∪ span(block)`; the columns of `b` stay a prefix.
///
/// The cutoff is computed from the block's own scale over the combined
/// column count. Residue of a block lying in `span(b)` is rounding noise of
/// order `ε‖block‖`, close to that cutoff; sequential decompositions should
/// fix the rank from the concatenated matrix and use [`extend_basis_by`].
pub fn extend_basis(
    b: &ProjectorBasis,
    block: &DMatrix<f64>,
    criterion: CutoffCriterion,
) -> Result<ProjectorBasis> {
    b.check_len(block.nrows(), "extend_basis")?;
    let mut out = b.clone();
    out.criterion = criterion;
    if block.ncols() == 0 {
        return Ok(out);
    }
    let (u, sv) = residual_svd(&b.basis, block)?;
    let cutoff = criterion.cutoff(MatrixScale::of(block)?, block.nrows(), b.rank() + block.ncols());
    let (keep, discarded) = split_by_cutoff(&sv, cutoff);
    out.cutoff_used = out.cutoff_used.max(cutoff);
    out.discarded.extend(discarded);
    append_directions(&mut out, &u, &keep);
    Ok(out)
}

/// Appends the `count` strongest directions of `block` outside `span(b)`.
pub fn extend_basis_by(b: &ProjectorBasis, block: &DMatrix<f64>, count: usize) -> Result<ProjectorBasis> {
    b.check_len(block.nrows(), "extend_basis_by")?;
    let mut out = b.clone();
    if count == 0 || block.ncols() == 0 {
        return Ok(out);
    }
    if count > block.ncols().min(b.ambient_dim - b.rank()) {
        return Err(Error::InvalidArgument(format!(
            "cannot add {count} directions from a {}-column block to a rank {} basis in dimension {}",
            block.ncols(),
            b.rank(),
            b.ambient_dim
        )));
    }
    let (u, sv) = residual_svd(&b.basis, block)?;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &c| sv[c].total_cmp(&sv[a]).then(a.cmp(&c)));
    order.truncate(count);
    append_directions(&mut out, &u, &order);
    Ok(out)
}

/// Left singular vectors and values of `block` with `span(q)` removed
/// (projected out twice).
fn residual_svd(q: &DMatrix<f64>, block: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    thin_svd_left(&null_project(q, &null_project(q, block)))
}

fn append_directions(out: &mut ProjectorBasis, u: &DMatrix<f64>, keep: &[usize]) {
    if keep.is_empty() {
        return;
    }
    let q = &out.basis;
    // Directions with small singular values carry relative rounding error
    // along the old basis; strip it and re-orthonormalize.
    let fresh = null_project(q, &select_columns(u, keep));
    let fresh = fresh.qr().q();
    let mut basis = DMatrix::zeros(out.ambient_dim, q.ncols() + fresh.ncols());
    basis.columns_mut(0, q.ncols()).copy_from(q);
    basis.columns_mut(q.ncols(), fresh.ncols()).copy_from(&fresh);
    out.basis = basis;
}

/// Records the cutoff metadata of the source matrix a basis was built for.
pub fn with_cutoff_metadata(
    mut b: ProjectorBasis,
    criterion: CutoffCriterion,
    cutoff: f64,
    discarded: Vec<f64>,
) -> ProjectorBasis {
    b.criterion = criterion;
    b.cutoff_used = cutoff;
    b.discarded = discarded;
    b
}

/// `vec(M)`: columns stacked top to bottom.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Horizontal concatenation.
pub fn hstack<'a, I>(rows: usize, blocks: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let blocks: Vec<&DMatrix<f64>> = blocks.into_iter().collect();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack: row count mismatch");
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// `I_n ⊗ m`
pub fn kron_identity(n: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(n * r, n * c);
    for i in 0..n {
        out.view_mut((i * r, i * c), (r, c)).copy_from(m);
    }
    out
}
