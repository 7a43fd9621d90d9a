//! Linearly acting units with separated edges, and the loss bounds they
//! give against basis function regression on hidden representations.
//!
//! Layer numbering follows [`crate::minima`]: representation `Φ^(0)` is the
//! input, index sets are kept for layers `t+1..=H+1`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_space_basis, hstack, vec_of, CutoffCriterion, ProjectorBasis};
use crate::minima::{assemble_d, decompose_blocks, Contribution};
use crate::network::{loss, ActivationTensor, ForwardTrace, NetworkArch, NetworkParams};

/// Relative tolerance for the equalities in the structure conditions.
pub const DEFAULT_STRUCTURE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Weak,
    Strong,
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureKind::Weak => "weak",
            StructureKind::Strong => "strong",
        })
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weak" => Ok(StructureKind::Weak),
            "strong" => Ok(StructureKind::Strong),
            other => Err(Error::InvalidArgument(format!("unknown structure kind {other:?} (weak, strong)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureCert {
    pub t: usize,
    pub n: usize,
    pub kind: StructureKind,
    pub tol: f64,
    /// `sets[i]` holds the units of layer `t + 1 + i`, sorted; the last
    /// entry is the output layer.
    pub sets: Vec<Vec<usize>>,
}

impl StructureCert {
    /// Units of layer `layer` in `t+1..=H+1`.
    pub fn set(&self, layer: usize) -> &[usize] {
        &self.sets[layer - self.t - 1]
    }

    /// Output layer index `H+1`.
    pub fn top(&self) -> usize {
        self.t + self.sets.len()
    }

    /// The same sets viewed as a weak certificate; strong separation implies
    /// weak separation.
    pub fn as_weak(&self) -> StructureCert {
        StructureCert { kind: StructureKind::Weak, ..self.clone() }
    }

    fn check_against(&self, arch: &NetworkArch) -> Result<()> {
        let widths = arch.widths();
        let h = arch.depth();
        if self.t > h || self.sets.len() != h + 1 - self.t {
            return Err(Error::InvalidArgument(format!(
                "certificate at t={} with {} sets does not fit a net of depth {h}",
                self.t,
                self.sets.len()
            )));
        }
        for (i, set) in self.sets.iter().enumerate() {
            let l = self.t + 1 + i;
            if let Some(&k) = set.iter().find(|&&k| k >= widths[l]) {
                return Err(Error::InvalidArgument(format!("certificate names unit {k} of layer {l}, width {}", widths[l])));
            }
        }
        Ok(())
    }
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub S: Vec<usize>,
    pub regression_term: f64,
    pub improvement_term: f64,
    pub bound: f64,
    pub L_value: f64,
    pub contributions: Vec<Contribution>,
}

/// Units `k` of hidden layer `layer` with `‖Φ_k − G_k‖ ≤ tol·‖G_k‖`, where
/// `G` is the preactivation.
pub fn linear_units(trace: &ForwardTrace, layer: usize, tol: f64) -> Vec<usize> {
    let phi = trace.phi(layer);
    let g = trace.preactivation(layer);
    (0..phi.ncols())
        .filter(|&k| (phi.column(k) - g.column(k)).norm() <= tol * g.column(k).norm())
        .collect()
}

fn edge_is_zero(w: &DMatrix<f64>, from: usize, to: usize, tol: f64) -> bool {
    w[(from, to)].abs() <= tol * w.amax()
}

/// Largest index sets satisfying the conditions, found by starting from all
/// linearly acting units and removing units until every condition holds.
/// `None` when some set ends up smaller than `n`, or `t > H`.
pub fn detect_structure(
    trace: &ForwardTrace,
    params: &NetworkParams,
    n: usize,
    t: usize,
    kind: StructureKind,
    tol: f64,
) -> Option<StructureCert> {
    let arch = params.arch();
    let h = arch.depth();
    if t > h || trace.depth() != h {
        return None;
    }
    let mut member: Vec<Vec<bool>> = (t + 1..=h)
        .map(|l| {
            let mut row = vec![false; arch.widths()[l]];
            for k in linear_units(trace, l, tol) {
                row[k] = true;
            }
            row
        })
        .collect();
    member.push(vec![true; arch.output_dim]);
    let idx = |l: usize| l - t - 1;

    let mut changed = true;
    while changed {
        changed = false;
        for l in (t + 1..h).rev() {
            let w = params.weight(l + 1);
            if kind == StructureKind::Strong {
                // Units of S^(l+1) may read layer l only through S^(l).
                let phi = trace.phi(l);
                for k in 0..w.ncols() {
                    if !member[idx(l + 1)][k] {
                        continue;
                    }
                    let mut outside = nalgebra::DVector::zeros(phi.nrows());
                    let mut scale = 0.0;
                    for kp in 0..w.nrows() {
                        scale += phi.column(kp).norm() * w[(kp, k)].abs();
                        if !member[idx(l)][kp] {
                            outside += phi.column(kp) * w[(kp, k)];
                        }
                    }
                    if outside.norm() > tol * scale {
                        member[idx(l + 1)][k] = false;
                        changed = true;
                    }
                }
            }
            for kp in 0..w.nrows() {
                if !member[idx(l)][kp] {
                    continue;
                }
                let leaks = (0..w.ncols()).any(|k| !member[idx(l + 1)][k] && !edge_is_zero(w, kp, k, tol));
                if leaks {
                    member[idx(l)][kp] = false;
                    changed = true;
                }
            }
        }
    }

    let sets: Vec<Vec<usize>> = member
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k).collect())
        .collect();
    if sets.iter().any(|s| s.len() < n) {
        return None;
    }
    Some(StructureCert { t, n, kind, tol, sets })
}

/// 0/1 masks over `W^(1)..W^(H+1)` with zeros on the edges that leave
/// `S^(l)` for units outside `S^(l+1)`, `l` in `t+1..H`. `sets` is laid out
/// as [`StructureCert::sets`].
pub fn forbidden_edge_mask(arch: &NetworkArch, t: usize, sets: &[Vec<usize>]) -> Result<Vec<DMatrix<f64>>> {
    let probe = StructureCert { t, n: 0, kind: StructureKind::Weak, tol: 0.0, sets: sets.to_vec() };
    probe.check_against(arch)?;
    let widths = arch.widths();
    let h = arch.depth();
    let mut masks: Vec<DMatrix<f64>> = (1..=h + 1)
        .map(|l| DMatrix::from_element(widths[l - 1], widths[l], 1.0))
        .collect();
    for l in t + 1..h {
        let inside = probe.set(l);
        let next = probe.set(l + 1);
        for &kp in inside {
            for k in (0..widths[l + 1]).filter(|k| !next.contains(k)) {
                masks[l][(kp, k)] = 0.0;
            }
        }
    }
    Ok(masks)
}

/// `[Φ^(l)]_{l∈S}`, `m × 0` for empty `S`.
pub fn representation_matrix(trace: &ForwardTrace, layers: &[usize]) -> Result<DMatrix<f64>> {
    if let Some(&l) = layers.iter().find(|&&l| l > trace.depth()) {
        return Err(Error::InvalidArgument(format!("no hidden representation {l} in a net of depth {}", trace.depth())));
    }
    Ok(hstack(trace.samples(), layers.iter().map(|&l| trace.phi(l).inner())))
}

/// `½‖P_N[Φ_S] Y‖²`, the least-squares residual of regressing `Y` on the
/// columns of `phi_s`.
pub fn regression_optimum(phi_s: &DMatrix<f64>, y: &DMatrix<f64>, c: CutoffCriterion) -> Result<f64> {
    if phi_s.nrows() != y.nrows() {
        return Err(Error::shape("basis rows", y.nrows(), phi_s.nrows()));
    }
    let b = column_space_basis(phi_s, c)?;
    let r = b.project_null_columns(y)?;
    Ok(0.5 * r.norm_squared())
}

fn check_subsequence(s: &[usize], allowed: &[usize]) -> Result<()> {
    for (i, l) in s.iter().enumerate() {
        if !allowed.contains(l) {
            return Err(Error::InvalidArgument(format!("layer {l} is not allowed in S; allowed layers are {allowed:?}")));
        }
        if s[..i].contains(l) {
            return Err(Error::InvalidArgument(format!("layer {l} repeated in S")));
        }
    }
    Ok(())
}

fn bound_from_blocks(
    trace: &ForwardTrace,
    y: &DMatrix<f64>,
    s: &[usize],
    blocks: &[(usize, usize, &DMatrix<f64>)],
    c: CutoffCriterion,
) -> Result<BoundReport> {
    let phi_s = representation_matrix(trace, s)?;
    if y.shape() != trace.output().shape() {
        return Err(Error::shape(
            "targets",
            format!("{}x{}", trace.samples(), trace.output().ncols()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    let dy = y.ncols();
    let base = column_space_basis(&phi_s, c)?;
    let regression_term = 0.5 * base.project_null_columns(y)?.norm_squared();
    let pre: Option<ProjectorBasis> = (!s.is_empty()).then(|| base.kron_identity(dy));
    let dec = decompose_blocks(blocks, &vec_of(y), pre.as_ref(), c)?;
    let improvement_term = dec.total();
    Ok(BoundReport {
        S: s.to_vec(),
        regression_term,
        improvement_term,
        bound: regression_term - improvement_term,
        L_value: loss(trace, y)?,
        contributions: dec.contributions,
    })
}

/// Regression optimum over `Φ^(S)` minus the gain of the hidden-layer
/// blocks null-projected against `I ⊗ Φ^(S)`.
pub fn theorem2_bound(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    cert: &StructureCert,
    s: &[usize],
    c: CutoffCriterion,
) -> Result<BoundReport> {
    if cert.kind != StructureKind::Weak {
        return Err(Error::InvalidArgument(
            "strong certificates go through corollary2_bound; use as_weak() for the general bound".into(),
        ));
    }
    cert.check_against(params.arch())?;
    check_subsequence(s, &(cert.t..=params.arch().depth()).collect::<Vec<_>>())?;
    let d = assemble_d(trace, patterns, params)?;
    bound_from_blocks(trace, y, s, &d.ordered(false), c)
}

/// The bound for the net restricted to the certificate's allowed edges:
/// forbidden edges are held at zero, and a unit outside `S^(l)`, `l ≥ t+2`,
/// only keeps the columns of its block coming from outside `S^(l-1)`.
pub fn corollary1_bound(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    cert: &StructureCert,
    s: &[usize],
    c: CutoffCriterion,
) -> Result<BoundReport> {
    if cert.kind != StructureKind::Weak {
        return Err(Error::InvalidArgument("corollary1_bound takes a weak certificate".into()));
    }
    let arch = params.arch();
    let h = arch.depth();
    cert.check_against(arch)?;
    check_subsequence(s, &(cert.t..=h).collect::<Vec<_>>())?;
    let masks = forbidden_edge_mask(arch, cert.t, &cert.sets)?;
    let restricted = params.map_weights(|l, w| w.component_mul(&masks[l - 1]))?;
    let d = assemble_d(trace, patterns, &restricted)?;

    let mut owned: Vec<(usize, usize, DMatrix<f64>)> = Vec::new();
    for (l, k, block) in d.ordered(false) {
        if l >= cert.t + 2 && !cert.set(l).contains(&k) {
            let keep: Vec<usize> = (0..block.ncols()).filter(|j| !cert.set(l - 1).contains(j)).collect();
            owned.push((l, k, block.select_columns(&keep)));
        } else {
            owned.push((l, k, block.clone()));
        }
    }
    let blocks: Vec<_> = owned.iter().map(|(l, k, b)| (*l, *k, b)).collect();
    bound_from_blocks(trace, y, s, &blocks, c)
}

/// [`theorem2_bound`] under a strong certificate, with `S` drawn from
/// `{t, H}` only.
pub fn corollary2_bound(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    cert: &StructureCert,
    s: &[usize],
    c: CutoffCriterion,
) -> Result<BoundReport> {
    if cert.kind != StructureKind::Strong {
        return Err(Error::InvalidArgument("corollary2_bound needs a strong certificate".into()));
    }
    let h = params.arch().depth();
    cert.check_against(params.arch())?;
    check_subsequence(s, &[cert.t, h])?;
    let d = assemble_d(trace, patterns, params)?;
    bound_from_blocks(trace, y, s, &d.ordered(false), c)
}

/// Every increasing subsequence of `layers`, the empty one first.
pub fn layer_subsets(layers: &[usize]) -> Vec<Vec<usize>> {
    (0u64..1 << layers.len())
        .map(|bits| layers.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, &l)| l).collect())
        .collect()
}

/// [`theorem2_bound`] for every `S ⊆ {t..H}`, in [`layer_subsets`] order.
pub fn theorem2_bounds_all(
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    params: &NetworkParams,
    y: &DMatrix<f64>,
    cert: &StructureCert,
    c: CutoffCriterion,
) -> Result<Vec<BoundReport>> {
    if cert.kind != StructureKind::Weak {
        return Err(Error::InvalidArgument("theorem2_bounds_all takes a weak certificate".into()));
    }
    cert.check_against(params.arch())?;
    let d = assemble_d(trace, patterns, params)?;
    let blocks = d.ordered(false);
    let layers: Vec<usize> = (cert.t..=params.arch().depth()).collect();
    layer_subsets(&layers)
        .par_iter()
        .map(|s| bound_from_blocks(trace, y, s, &blocks, c))
        .collect()
}

/// `(l, ‖Φ^(l)ᵀ(Ŷ − Y)‖_F)` for `l` in `t..=H`; zero at exact local minima
/// carrying a weak certificate at level `t`.
pub fn representation_residuals(trace: &ForwardTrace, y: &DMatrix<f64>, t: usize) -> Result<Vec<(usize, f64)>> {
    if y.shape() != trace.output().shape() {
        return Err(Error::shape("targets", trace.output().nrows(), y.nrows()));
    }
    if t > trace.depth() {
        return Err(Error::InvalidArgument(format!("t={t} exceeds depth {}", trace.depth())));
    }
    let r = trace.output().inner() - y;
    Ok((t..=trace.depth()).map(|l| (l, (trace.phi(l).transpose() * &r).norm())).collect())
}
