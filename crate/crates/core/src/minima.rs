//! Closed-form loss value at differentiable local minima.
//!
//! Layers are numbered as in the model: 0 is the input, `1..=H` are hidden
//! layers and `H+1` is the output. Units are 0-based. Row `o·m + i` of
//! every block corresponds to entry `(i, o)` of the output (`vec` stacks
//! columns).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    column_space_basis, extend_basis_by, hstack, inf_norm, kron_identity, singular_values,
    vec_of, with_cutoff_metadata, CutoffCriterion, MatrixScale, ProjectorBasis,
};
use crate::network::{gradient_from_trace, loss, ActivationTensor, ForwardTrace, NetworkParams};

/// Default refusal threshold for the dense block assembly: 1 GiB.
pub const DEFAULT_MEMORY_CAP: usize = 1 << 30;

/// Column blocks of the output Jacobian.
#[derive(Clone, Debug)]
pub struct DBlocks {
    samples: usize,
    outputs: usize,
    /// `blocks[l-1][k]` is the block of unit `k` in hidden layer `l`.
    blocks: Vec<Vec<DMatrix<f64>>>,
    last: DMatrix<f64>,
}

impl DBlocks {
    pub fn from_parts(
        samples: usize,
        outputs: usize,
        blocks: Vec<Vec<DMatrix<f64>>>,
        last: DMatrix<f64>,
    ) -> Result<Self> {
        let rows = samples * outputs;
        for b in blocks.iter().flatten().chain(std::iter::once(&last)) {
            if b.nrows() != rows {
                return Err(Error::shape("D block rows", rows, b.nrows()));
            }
        }
        Ok(DBlocks { samples, outputs, blocks, last })
    }

    pub fn rows(&self) -> usize {
        self.samples * self.outputs
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self, layer: usize) -> usize {
        self.blocks[layer - 1].len()
    }

    /// Block of unit `unit` in hidden layer `layer` (1-based layer).
    pub fn block(&self, layer: usize, unit: usize) -> &DMatrix<f64> {
        &self.blocks[layer - 1][unit]
    }

    /// `I_{d_y} ⊗ Φ^(H)`
    pub fn last_block(&self) -> &DMatrix<f64> {
        &self.last
    }

    /// All blocks of one hidden layer side by side; equals the Jacobian of
    /// `vec(Ŷ)` with respect to `vec(W^(l))`.
    pub fn layer_matrix(&self, layer: usize) -> DMatrix<f64> {
        hstack(self.rows(), &self.blocks[layer - 1])
    }

    /// `[D^(1) … D^(H)]`, or with the final block appended.
    pub fn concatenated(&self, include_last: bool) -> DMatrix<f64> {
        let last = include_last.then_some(&self.last);
        hstack(self.rows(), self.blocks.iter().flatten().chain(last))
    }

    /// Blocks in decomposition order, labelled `(layer, unit)`.
    pub fn ordered(&self, include_last: bool) -> Vec<(usize, usize, &DMatrix<f64>)> {
        let mut out: Vec<_> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.iter().enumerate().map(move |(k, b)| (l + 1, k, b)))
            .collect();
        if include_last {
            out.push((self.depth() + 1, 0, &self.last));
        }
        out
    }
}

/// Bytes needed for the dense blocks of a net of the given widths
/// `[d_0, …, d_{H+1}]` on `m` samples.
pub fn d_blocks_bytes(widths: &[usize], samples: usize) -> usize {
    let h = widths.len() - 2;
    let dy = widths[h + 1];
    let cols: usize = (1..=h).map(|l| widths[l - 1] * widths[l]).sum::<usize>() + widths[h] * dy;
    8usize.saturating_mul(samples).saturating_mul(dy).saturating_mul(cols)
}

pub fn assemble_d(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
) -> Result<DBlocks> {
    assemble_d_capped(trace, patterns, params, DEFAULT_MEMORY_CAP)
}

/// Builds every block through the backward chain
/// `B^(H)_o[i,k] = W^(H+1)[k,o]`,
/// `B^(l)_o = (Λ^(l+1) ∘ B^(l+1)_o) · W^(l+1)ᵀ`,
/// with `D_k^(l)[o·m+i, j] = B^(l)_o[i,k] · Λ^(l)[i,k] · Φ^(l-1)[i,j]`.
pub fn assemble_d_capped(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    cap_bytes: usize,
) -> Result<DBlocks> {
    let arch = params.arch();
    let h = arch.depth();
    let m = trace.samples();
    let widths = arch.widths();
    if trace.depth() != h || patterns.depth() != h || trace.input().ncols() != arch.input_dim {
        return Err(Error::shape("trace/pattern depth", h, trace.depth()));
    }
    let needed = d_blocks_bytes(&widths, m);
    if needed > cap_bytes {
        return Err(Error::TooLarge {
            what: format!(
                "dense Jacobian blocks for m={m}, widths {widths:?}; reduce the sample count or the widths"
            ),
            needed_bytes: needed as u64,
            cap_bytes: cap_bytes as u64,
        });
    }
    let dy = arch.output_dim;
    let rows = m * dy;

    // chain[o] is B^(l)_o, an m × d_l matrix.
    let w_out = params.weight(h + 1);
    let mut chain: Vec<DMatrix<f64>> = (0..dy)
        .map(|o| DMatrix::from_fn(m, widths[h], |_, k| w_out[(k, o)]))
        .collect();
    let mut blocks = vec![Vec::new(); h];
    for l in (1..=h).rev() {
        let lam = patterns.layer(l);
        let phi_prev = trace.phi(l - 1);
        let d_prev = widths[l - 1];
        let mut layer_blocks = Vec::with_capacity(widths[l]);
        for k in 0..widths[l] {
            let mut block = DMatrix::zeros(rows, d_prev);
            for (o, b) in chain.iter().enumerate() {
                for j in 0..d_prev {
                    for i in 0..m {
                        block[(o * m + i, j)] = b[(i, k)] * lam[(i, k)] * phi_prev[(i, j)];
                    }
                }
            }
            layer_blocks.push(block);
        }
        blocks[l - 1] = layer_blocks;
        if l > 1 {
            let w = params.weight(l);
            chain = chain
                .iter()
                .map(|b| b.component_mul(lam) * w.transpose())
                .collect();
        }
    }
    let last = kron_identity(dy, trace.phi(h));
    DBlocks::from_parts(m, dy, blocks, last)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Contribution {
    pub layer: usize,
    pub unit: usize,
    pub value: f64,
}

impl From<(usize, usize, f64)> for Contribution {
    fn from((layer, unit, value): (usize, usize, f64)) -> Self {
        Contribution { layer, unit, value }
    }
}

impl From<Contribution> for (usize, usize, f64) {
    fn from(c: Contribution) -> Self {
        (c.layer, c.unit, c.value)
    }
}

#[derive(Clone, Debug)]
pub struct QDecomposition {
    pub running_basis: ProjectorBasis,
    /// In decomposition order.
    pub contributions: Vec<Contribution>,
}

impl QDecomposition {
    pub fn total(&self) -> f64 {
        self.contributions.iter().map(|c| c.value).sum()
    }
}

/// Sequential block projection over the fixed order (layer 1 unit 0, …,
/// layer H last unit, then the output block when `include_last`).
pub fn decompose_contributions(
    d: &DBlocks,
    y: &DMatrix<f64>,
    pre_projector: Option<&ProjectorBasis>,
    c: CutoffCriterion,
    include_last: bool,
) -> Result<QDecomposition> {
    if y.shape() != (d.samples(), d.outputs()) {
        return Err(Error::shape(
            "targets for decomposition",
            format!("{}x{}", d.samples(), d.outputs()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    decompose_blocks(&d.ordered(include_last), &vec_of(y), pre_projector, c)
}

/// Same as [`decompose_contributions`] over an arbitrary labelled block list.
/// Each block is null-projected by `pre_projector` first, then against the
/// span of every earlier block; its contribution is half the squared norm
/// of `vec_y` projected onto the new directions.
///
/// The number of new directions a block adds is the rank increase of the
/// concatenated (pre-projected) prefix, with the cutoff computed once for the
/// whole concatenation. The final rank therefore equals the one-shot rank.
/// With a pre-projector the cutoff is computed from the larger of the
/// projected and the raw scale and multiplied by the pre-projector's
/// conditioning times the row count.
pub fn decompose_blocks(
    blocks: &[(usize, usize, &DMatrix<f64>)],
    vec_y: &DVector<f64>,
    pre_projector: Option<&ProjectorBasis>,
    c: CutoffCriterion,
) -> Result<QDecomposition> {
    let n = vec_y.len();
    for &(_, _, block) in blocks {
        if block.nrows() != n {
            return Err(Error::shape("D block rows", n, block.nrows()));
        }
    }
    if let Some(p) = pre_projector {
        if p.ambient_dim() != n {
            return Err(Error::shape("pre-projector dimension", n, p.ambient_dim()));
        }
    }
    let projected: Vec<DMatrix<f64>> = match pre_projector {
        Some(p) => blocks.iter().map(|b| p.project_null_columns(b.2)).collect::<Result<_>>()?,
        None => blocks.iter().map(|b| b.2.clone()).collect(),
    };
    let full = hstack(n, &projected);
    let sv = singular_values(&full)?;
    let mut scale = MatrixScale {
        sigma_max: sv.iter().copied().fold(0.0, f64::max),
        inf_norm: inf_norm(&full),
    };
    let mut cutoff_factor = 1.0;
    if let Some(p) = pre_projector {
        // What survives the pre-projection is rounding residue of order
        // ε · n · conditioning · ‖blocks‖ when it should be zero.
        scale = scale.max(MatrixScale::of(&hstack(n, blocks.iter().map(|b| b.2)))?);
        cutoff_factor = p.conditioning() * n as f64;
    }
    let cutoff = c.cutoff(scale, n, full.ncols()) * cutoff_factor;
    let full_rank = sv.iter().filter(|&&s| s > cutoff).count();

    let mut basis = ProjectorBasis::empty(n, c);
    let mut contributions = Vec::with_capacity(blocks.len());
    let mut cols = 0;
    for (&(layer, unit, _), block) in blocks.iter().zip(&projected) {
        cols += block.ncols();
        let rank = if basis.rank() >= full_rank || block.iter().all(|&v| v == 0.0) {
            basis.rank()
        } else if cols == full.ncols() {
            full_rank
        } else {
            let prefix = full.columns(0, cols).into_owned();
            singular_values(&prefix)?.iter().filter(|&&s| s > cutoff).count()
        };
        let old = basis.rank();
        basis = extend_basis_by(&basis, block, rank.saturating_sub(old))?;
        let fresh = basis.basis().columns(old, basis.rank() - old);
        let value = 0.5 * (fresh.transpose() * vec_y).norm_squared();
        contributions.push(Contribution { layer, unit, value });
    }
    let discarded = {
        let mut d: Vec<f64> = sv.into_iter().filter(|&s| s <= cutoff).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        d
    };
    let running_basis = with_cutoff_metadata(basis, c, cutoff, discarded);
    Ok(QDecomposition { running_basis, contributions })
}

/// `½‖P_N[M] v‖²` computed from the residual.
pub fn null_residual_half_sq(m: &DMatrix<f64>, v: &DVector<f64>, c: CutoffCriterion) -> Result<(f64, usize)> {
    let b = column_space_basis(m, c)?;
    Ok((0.5 * b.project_null(v)?.norm_squared(), b.rank()))
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimaReport {
    pub L: f64,
    pub J_direct: f64,
    pub J_decomposed: f64,
    pub grad_norm: f64,
    pub differentiable: bool,
    pub contributions: Vec<Contribution>,
    /// Numerical rank of `[D D_1^(H+1)]`.
    pub rank: usize,
    pub criterion: CutoffCriterion,
}

/// `J` by one projection of the concatenated blocks (`J_direct`) and by the
/// sequential decomposition (`J_decomposed`).
pub fn compute_j(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    c: CutoffCriterion,
) -> Result<MinimaReport> {
    compute_j_capped(trace, patterns, params, y, c, DEFAULT_MEMORY_CAP)
}

pub fn compute_j_capped(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    c: CutoffCriterion,
    cap_bytes: usize,
) -> Result<MinimaReport> {
    let l_value = loss(trace, y)?;
    let grad = gradient_from_trace(params, trace, patterns, y)?;
    let d = assemble_d_capped(trace, patterns, params, cap_bytes)?;
    let vy = vec_of(y);
    let (j_direct, rank) = null_residual_half_sq(&d.concatenated(true), &vy, c)?;
    let dec = decompose_contributions(&d, y, None, c, true)?;
    let j_decomposed = (0.5 * vy.norm_squared() - dec.total()).max(0.0);
    Ok(MinimaReport {
        L: l_value,
        J_direct: j_direct,
        J_decomposed: j_decomposed,
        grad_norm: grad.norm(),
        differentiable: patterns.is_differentiable(),
        contributions: dec.contributions,
        rank,
        criterion: c,
    })
}

/// `J_direct` alone, skipping the per-unit decomposition.
pub fn j_direct(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    c: CutoffCriterion,
) -> Result<f64> {
    let d = assemble_d(trace, patterns, params)?;
    if y.shape() != (d.samples(), d.outputs()) {
        return Err(Error::shape("targets", d.rows(), y.len()));
    }
    Ok(null_residual_half_sq(&d.concatenated(true), &vec_of(y), c)?.0)
}
