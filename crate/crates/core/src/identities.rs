//! Randomized checks of the algebraic identities the loss formula rests on:
//! the output factorization through each layer's blocks, additivity of
//! projectors onto orthogonal blocks, the per-unit decomposition of the
//! projected target, and the shallow local-minimum loss.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{column_space_basis, hstack, vec_of, CutoffCriterion, DenseMatrix};
use crate::minima::{assemble_d, compute_j};
use crate::network::{activation_patterns, forward, init_params, ActivationKind, NetworkArch, DEFAULT_EPS_ACT};
use crate::planted::{teacher_problem, TeacherSpec};
use crate::random_lab::{shallow_min_loss, PatternMatrix};
use crate::seed::derive_seed;
use crate::trainer::{descend_to_stationarity, DescentOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub cases: usize,
    /// Cases that produced a comparison; the shallow-loss suite skips runs
    /// that do not reach a differentiable stationary point.
    pub checked: usize,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(name: &str, cases: usize, errors: &[f64], tol: f64, min_checked: usize) -> Self {
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        IdentityCheck {
            name: name.into(),
            cases,
            checked: errors.len(),
            max_error,
            tol,
            passed: errors.len() >= min_checked && errors.iter().all(|e| *e <= tol),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

const ACTIVATIONS: [ActivationKind; 4] = [
    ActivationKind::Relu,
    ActivationKind::Abs,
    ActivationKind::LeakyRelu { slope: 0.1 },
    ActivationKind::Linear,
];

fn random_arch(rng: &mut ChaCha8Rng) -> Result<NetworkArch> {
    let depth = rng.random_range(1..=3);
    let widths = (0..depth).map(|_| rng.random_range(1..=4)).collect();
    let act = ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())];
    NetworkArch::uniform(rng.random_range(1..=3), widths, rng.random_range(1..=2), act)
}

/// `vec(Ŷ) = D^(l) vec(W^(l))` for every hidden layer, relative error.
pub fn output_factorization_check(cases: usize, seed: u64) -> Result<IdentityCheck> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[case as u64]));
        let arch = random_arch(&mut rng)?;
        let params = init_params(&arch, rng.random(), 1.0)?;
        let m = rng.random_range(1..=8);
        let x = DenseMatrix::new(normal(&mut rng, m, arch.input_dim))?;
        let trace = forward(&params, &x)?;
        let patterns = activation_patterns(&trace, DEFAULT_EPS_ACT)?;
        let d = assemble_d(&trace, &patterns, &params)?;
        let yhat = vec_of(trace.output().inner());
        let mut worst = 0.0f64;
        for l in 1..=arch.depth() {
            let rebuilt = d.layer_matrix(l) * vec_of(params.weight(l).inner());
            worst = worst.max((rebuilt - &yhat).norm() / (1.0 + yhat.norm()));
        }
        errors.push(worst);
    }
    Ok(IdentityCheck::new("output_factorization", cases, &errors, 1e-8, cases))
}

/// `P[[A B]] v = P[A] v + P[B] v` when `AᵀB = 0`, error relative to `‖v‖`.
pub fn orthogonal_additivity_check(cases: usize, seed: u64, c: CutoffCriterion) -> Result<IdentityCheck> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[case as u64]));
        let n = rng.random_range(2..=12);
        let (ca, cb) = (rng.random_range(0..=n / 2), rng.random_range(0..=n / 2));
        let a = normal(&mut rng, n, ca);
        let pa = column_space_basis(&a, c)?;
        let b = pa.project_null_columns(&normal(&mut rng, n, cb))?;
        let v = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let joint = column_space_basis(&hstack(n, [&a, &b]), c)?.project(&v)?;
        let split = pa.project(&v)? + column_space_basis(&b, c)?.project(&v)?;
        errors.push((joint - split).norm() / v.norm().max(f64::MIN_POSITIVE));
    }
    Ok(IdentityCheck::new("orthogonal_additivity", cases, &errors, 1e-9, cases))
}

/// Per-unit contributions sum to the one-shot projection:
/// `|J_direct − J_decomposed| / (1 + ½‖Y‖²)`.
pub fn unit_decomposition_check(cases: usize, seed: u64, c: CutoffCriterion) -> Result<IdentityCheck> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[case as u64]));
        let arch = random_arch(&mut rng)?;
        let params = init_params(&arch, rng.random(), 1.0)?;
        let m = rng.random_range(1..=10);
        let x = DenseMatrix::new(normal(&mut rng, m, arch.input_dim))?;
        let y = normal(&mut rng, m, arch.output_dim);
        let trace = forward(&params, &x)?;
        let patterns = activation_patterns(&trace, DEFAULT_EPS_ACT)?;
        let r = compute_j(&trace, &patterns, &params, &y, c)?;
        errors.push((r.J_direct - r.J_decomposed).abs() / (1.0 + 0.5 * y.norm_squared()));
    }
    Ok(IdentityCheck::new("unit_decomposition", cases, &errors, 1e-6, cases))
}

/// One-hidden-layer ReLU teacher problems descended to a differentiable
/// stationary point: `|L − ½‖P_N[D̃] Y‖²|`. Runs that stall, end on a kink
/// or have a zero output weight are skipped; at least a quarter must count.
pub fn shallow_loss_check(cases: usize, seed: u64, c: CutoffCriterion) -> Result<IdentityCheck> {
    let arch = NetworkArch::uniform(2, vec![3], 1, ActivationKind::Relu)?;
    let opts = DescentOptions { tol: 1e-10, max_iters: 50_000, ..Default::default() };
    let outcomes: Vec<Option<f64>> = (0..cases)
        .into_par_iter()
        .map(|case| -> Result<Option<f64>> {
            let spec = TeacherSpec { samples: 16, margin: 0.1, noise: 0.1, seed: derive_seed(seed, &[case as u64]) };
            let p = teacher_problem(&arch, spec)?;
            let (params, rep) = descend_to_stationarity(&p.start, &p.x, &p.y, opts)?;
            if !(rep.differentiable && rep.grad_norm <= opts.tol) || params.weight(2).iter().any(|w| w.abs() < 1e-3) {
                return Ok(None);
            }
            let trace = forward(&params, &p.x)?;
            let lam = activation_patterns(&trace, DEFAULT_EPS_ACT)?.layer(1).clone();
            let lam = PatternMatrix::new(DenseMatrix::new(lam)?)?;
            Ok(Some((rep.loss - shallow_min_loss(&lam, &p.x, &p.y, c)?).abs()))
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = outcomes.into_iter().flatten().collect();
    Ok(IdentityCheck::new("shallow_minimum_loss", cases, &errors, 1e-6, cases.div_ceil(4)))
}

/// All four suites with `cases` cases each.
pub fn run_all(cases: usize, seed: u64, c: CutoffCriterion) -> Result<Vec<IdentityCheck>> {
    Ok(vec![
        output_factorization_check(cases, derive_seed(seed, &[1]))?,
        orthogonal_additivity_check(cases, derive_seed(seed, &[2]), c)?,
        unit_decomposition_check(cases, derive_seed(seed, &[3]), c)?,
        shallow_loss_check(cases, derive_seed(seed, &[4]), c)?,
    ])
}
