//! Optimization drivers: mini-batch SGD with momentum, and full-batch
//! gradient descent with backtracking used to reach approximate
//! differentiable stationary points.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::{
    activation_patterns, forward, gradient_from_trace, loss, NetworkParams, DEFAULT_EPS_ACT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::synthetic()
    }
}

impl TrainConfig {
    /// Settings used for the synthetic regression data.
    pub fn synthetic() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 200,
            epochs: 40,
            seed: 0,
        }
    }

    /// Settings used for image-style feature data.
    pub fn image() -> Self {
        TrainConfig {
            momentum: 0.5,
            batch_size: 64,
            ..TrainConfig::synthetic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_data(params: &NetworkParams, x: &DenseMatrix, y: &DMatrix<f64>) -> Result<()> {
    let arch = params.arch();
    if x.ncols() != arch.input_dim {
        return Err(Error::shape("training input columns", arch.input_dim, x.ncols()));
    }
    if y.nrows() != x.nrows() || y.ncols() != arch.output_dim {
        return Err(Error::shape(
            "training targets",
            format!("{}x{}", x.nrows(), arch.output_dim),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    Ok(())
}

/// Full-batch loss and the per-layer gradient of `½‖Ŷ − Y‖²`, with masked
/// entries zeroed.
fn loss_and_gradient(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    mask: Option<&[DMatrix<f64>]>,
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let trace = forward(params, x)?;
    let patterns = activation_patterns(&trace, DEFAULT_EPS_ACT)?;
    let mut g = gradient_from_trace(params, &trace, &patterns, y)?.per_layer;
    if let Some(mask) = mask {
        for (gl, ml) in g.iter_mut().zip(mask) {
            gl.component_mul_assign(ml);
        }
    }
    Ok((loss(&trace, y)?, g))
}

fn full_loss(params: &NetworkParams, x: &DenseMatrix, y: &DMatrix<f64>) -> Result<f64> {
    loss(&forward(params, x)?, y)
}

/// `W ← W − lr · g` for every layer.
pub fn gradient_step(
    params: &NetworkParams,
    grads: &[DMatrix<f64>],
    lr: f64,
) -> Result<NetworkParams> {
    params.map_weights(|l, w| w - &grads[l - 1] * lr)
}

/// Mini-batch SGD with momentum (`v ← μv − η·g`, `W ← W + v`) on the mean
/// squared error `(2/|B|)·½‖Ŷ_B − Y_B‖²` of each batch.
///
/// Each epoch shuffles the samples with a ChaCha8 stream keyed by
/// `(cfg.seed, epoch)`. Returns the final parameters and the full-batch
/// loss `½‖Ŷ − Y‖²` before training (entry 0) and after every epoch.
pub fn train_sgd(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<f64>)> {
    cfg.validate()?;
    check_data(params, x, y)?;
    let m = x.nrows();
    let mut current = params.clone();
    let mut velocity: Vec<DMatrix<f64>> = params
        .weights()
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut history = vec![full_loss(&current, x, y)?];
    let mut order: Vec<usize> = (0..m).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = DenseMatrix::new(x.select_rows(batch))?;
            let yb = y.select_rows(batch);
            let (_, grads) = loss_and_gradient(&current, &xb, &yb, None)?;
            let scale = 2.0 / batch.len() as f64;
            for (v, g) in velocity.iter_mut().zip(&grads) {
                *v = &*v * cfg.momentum - g * (cfg.learning_rate * scale);
            }
            current = current
                .map_weights(|l, w| w + &velocity[l - 1])
                .map_err(|_| diverged(epoch))?;
        }
        let l = full_loss(&current, x, y)?;
        if !l.is_finite() {
            return Err(diverged(epoch));
        }
        history.push(l);
    }
    Ok((current, history))
}

fn diverged(epoch: usize) -> Error {
    Error::Numerical(format!(
        "training diverged during epoch {} (non-finite loss); lower the learning rate",
        epoch + 1
    ))
}

pub fn write_loss_history(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,loss\n");
    for (epoch, l) in history.iter().enumerate() {
        out.push_str(&format!("{epoch},{}\n", crate::linalg::io::format_value(*l)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// ℓ2 norm of the full gradient over all parameters.
    pub grad_norm: f64,
    pub min_abs_preactivation: f64,
    pub iterations_used: usize,
    pub differentiable: bool,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub eps_act: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            tol: 1e-8,
            max_iters: 100_000,
            eps_act: DEFAULT_EPS_ACT,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const INITIAL_STEP: f64 = 1.0;
const MIN_STEP: f64 = 1e-30;
const ROUNDING_FACTOR: f64 = 64.0;

/// Full-batch gradient descent with Armijo backtracking (shrink 0.5,
/// constant 1e-4) until the gradient norm is at most `tol` or `max_iters`
/// iterations have run. The first trial step is 1.0; later ones are the
/// Barzilai-Borwein step `‖s‖²/⟨s, Δg⟩` from the previous move, or twice the
/// last accepted step when that is not positive. Every accepted step passes
/// the Armijo test, so the loss never increases beyond rounding (see
/// [`try_step`] for the regime where the loss can no longer resolve it).
///
/// Running out of iterations is not an error; the report carries the
/// achieved gradient norm.
pub fn descend_to_stationarity(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    opts: DescentOptions,
) -> Result<(NetworkParams, StationarityReport)> {
    descend(params, x, y, opts, None)
}

/// As [`descend_to_stationarity`] over the weights whose `mask` entry is 1;
/// entries with mask 0 keep their starting value. The report's gradient
/// norm is taken over the free weights only.
pub fn descend_masked(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    opts: DescentOptions,
    mask: &[DMatrix<f64>],
) -> Result<(NetworkParams, StationarityReport)> {
    let shapes_match = mask.len() == params.weights().len()
        && mask.iter().zip(params.weights()).all(|(m, w)| m.shape() == w.shape());
    if !shapes_match {
        return Err(Error::shape("descent mask", params.weights().len(), mask.len()));
    }
    descend(params, x, y, opts, Some(mask))
}

fn descend(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    opts: DescentOptions,
    mask: Option<&[DMatrix<f64>]>,
) -> Result<(NetworkParams, StationarityReport)> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", opts.tol)));
    }
    check_data(params, x, y)?;
    let mut current = params.clone();
    let (mut f, mut grads) = loss_and_gradient(&current, x, y, mask)?;
    let mut iterations = 0;
    let mut step = INITIAL_STEP;
    let mut best = f;

    while iterations < opts.max_iters {
        let gsq = squared_norm(&grads);
        if gsq.sqrt() <= opts.tol {
            break;
        }
        let mut accepted = None;
        let mut t = step;
        while t >= MIN_STEP {
            if let Some(found) = try_step(&current, x, y, mask, &grads, (f, best), gsq, t)? {
                accepted = Some(found);
                break;
            }
            t *= SHRINK;
        }
        let Some((next, next_f, next_grads)) = accepted else {
            // No decrease is representable any more.
            break;
        };
        step = next_trial_step(&grads, &next_grads, t);
        current = next;
        f = next_f;
        best = best.min(f);
        grads = next_grads;
        iterations += 1;
    }

    let mut report = stationarity_report(&current, x, y, iterations, opts.eps_act)?;
    if mask.is_some() {
        report.grad_norm = squared_norm(&grads).sqrt();
    }
    Ok((current, report))
}

fn squared_norm(g: &[DMatrix<f64>]) -> f64 {
    g.iter().map(|m| m.norm_squared()).sum()
}

fn dot(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u.dot(v)).sum()
}

/// BB1 step for the move `s = −t·g_old`; falls back to `2t`.
fn next_trial_step(old: &[DMatrix<f64>], new: &[DMatrix<f64>], t: f64) -> f64 {
    // With s = −t g_old and Δg = g_new − g_old: ‖s‖²/⟨s,Δg⟩ = t‖g_old‖²/⟨g_old, g_old − g_new⟩.
    let gsq = squared_norm(old);
    let curv = gsq - dot(old, new);
    let bb = t * gsq / curv;
    if bb.is_finite() && bb > 0.0 {
        bb
    } else {
        2.0 * t
    }
}

type Accepted = (NetworkParams, f64, Vec<DMatrix<f64>>);

/// One backtracking trial. While the Armijo decrease is resolvable against
/// the rounding level of the loss the usual sufficient-decrease test
/// applies. Below it the change in loss is estimated by the trapezoid rule
/// `−t/2 ⟨g_old + g_new, g_old⟩` (exact on quadratics) and held to the
/// same Armijo amount, while the loss itself must stay within rounding of
/// the best value seen.
#[allow(clippy::too_many_arguments)]
fn try_step(
    current: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    mask: Option<&[DMatrix<f64>]>,
    grads: &[DMatrix<f64>],
    (f, best): (f64, f64),
    gsq: f64,
    step: f64,
) -> Result<Option<Accepted>> {
    let Ok(trial) = gradient_step(current, grads, step) else {
        return Ok(None);
    };
    let rounding = ROUNDING_FACTOR * f64::EPSILON * best.abs().max(f64::MIN_POSITIVE);
    let predicted = ARMIJO_C * step * gsq;
    if predicted > rounding {
        let ft = full_loss(&trial, x, y)?;
        if ft.is_finite() && ft <= f - predicted {
            let (ft, g) = loss_and_gradient(&trial, x, y, mask)?;
            return Ok(Some((trial, ft, g)));
        }
        return Ok(None);
    }
    let (ft, g) = loss_and_gradient(&trial, x, y, mask)?;
    let estimated = 0.5 * step * (gsq + dot(grads, &g));
    if ft.is_finite() && ft <= best + rounding && estimated >= predicted {
        Ok(Some((trial, ft, g)))
    } else {
        Ok(None)
    }
}

pub fn stationarity_report(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    iterations_used: usize,
    eps_act: f64,
) -> Result<StationarityReport> {
    let trace = forward(params, x)?;
    let patterns = activation_patterns(&trace, eps_act)?;
    let g = gradient_from_trace(params, &trace, &patterns, y)?;
    let min_abs = patterns.min_abs_preactivation();
    Ok(StationarityReport {
        grad_norm: g.norm(),
        min_abs_preactivation: min_abs,
        iterations_used,
        differentiable: min_abs > eps_act,
        loss: loss(&trace, y)?,
    })
}
