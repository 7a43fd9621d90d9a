//! Python bindings. Matrices cross the boundary as lists of rows (numpy
//! arrays are accepted on input); reports come back as dicts.

use minima_core::identities;
use minima_core::linalg::{CutoffCriterion, DenseMatrix};
use minima_core::minima as formula;
use minima_core::network::{self, io as net_io, ActivationKind, NetworkArch, NetworkParams, DEFAULT_EPS_ACT};
use minima_core::random_lab::{self, PatternKind, RankExperimentConfig, Regime};
use minima_core::seed;
use minima_core::structure::{self, StructureCert, StructureKind};
use minima_core::synthetic::{gen_synthetic as gen_core, SyntheticConfig};
use minima_core::trainer::{descend_to_stationarity, DescentOptions};
use minima_core::Error;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for minima_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(PyValueError::new_err("matrix needs at least one row and one column"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("row {i} has {} entries, expected {cols}", rows[i].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn dense(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::new(matrix(rows)?).py()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_dict<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn cutoff(name: &str) -> PyResult<CutoffCriterion> {
    name.parse().py()
}

/// Parameters of a fully connected bias-free network.
#[pyclass(name = "Network", module = "minima", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkParams,
}

#[pymethods]
impl PyNetwork {
    /// Random weights `Normal(0, (scale/√fan_in)²)`.
    #[new]
    #[pyo3(signature = (input_dim, widths, output_dim, activation = "relu", seed = 0, scale = 1.0))]
    fn new(input_dim: usize, widths: Vec<usize>, output_dim: usize, activation: &str, seed: u64, scale: f64) -> PyResult<Self> {
        let act: ActivationKind = activation.parse().py()?;
        let arch = NetworkArch::uniform(input_dim, widths, output_dim, act).py()?;
        Ok(PyNetwork { inner: network::init_params(&arch, seed, scale).py()? })
    }

    /// Builds a network from explicit weights; `weights[l]` has one row per
    /// unit of the previous layer.
    #[staticmethod]
    #[pyo3(signature = (weights, activation = "relu"))]
    fn from_weights(weights: Vec<Vec<Vec<f64>>>, activation: &str) -> PyResult<Self> {
        let act: ActivationKind = activation.parse().py()?;
        let mats = weights.into_iter().map(dense).collect::<PyResult<Vec<_>>>()?;
        let (Some(first), Some(last)) = (mats.first(), mats.last()) else {
            return Err(PyValueError::new_err("need at least one weight matrix"));
        };
        let widths = mats[..mats.len() - 1].iter().map(|w| w.ncols()).collect();
        let arch = NetworkArch::uniform(first.nrows(), widths, last.ncols(), act).py()?;
        Ok(PyNetwork { inner: NetworkParams::new(arch, mats).py()? })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(PyNetwork { inner: net_io::load_params(dir).py()?.0 })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        net_io::save_params(dir, &self.inner, None, None).py()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.arch().depth()
    }

    /// Layer widths from input to output.
    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.arch().widths()
    }

    #[getter]
    fn activations(&self) -> Vec<String> {
        self.inner.arch().activations.iter().map(ToString::to_string).collect()
    }

    fn weights(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.weights().iter().map(|w| rows_of(w.inner())).collect()
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let trace = network::forward(&self.inner, &dense(x)?).py()?;
        Ok(rows_of(trace.output().inner()))
    }

    /// `½‖Ŷ − Y‖²`.
    fn loss(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
        let trace = network::forward(&self.inner, &dense(x)?).py()?;
        network::loss(&trace, &matrix(y)?).py()
    }

    fn gradient_norm(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(network::gradient(&self.inner, &dense(x)?, &matrix(y)?).py()?.norm())
    }

    /// Gradient descent with backtracking until the gradient norm is at most
    /// `tol`; returns the new network and a report dict.
    #[pyo3(signature = (x, y, tol = 1e-8, max_iters = 100_000))]
    fn descend<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        tol: f64,
        max_iters: usize,
    ) -> PyResult<(PyNetwork, Bound<'py, PyAny>)> {
        let opts = DescentOptions { tol, max_iters, ..Default::default() };
        let (x, y) = (dense(x)?, matrix(y)?);
        let (params, report) = py.detach(|| descend_to_stationarity(&self.inner, &x, &y, opts)).py()?;
        Ok((PyNetwork { inner: params }, to_dict(py, &report)?))
    }

    fn __repr__(&self) -> String {
        format!("Network(widths={:?}, activations={:?})", self.widths(), self.activations())
    }
}

struct Point {
    trace: network::ForwardTrace,
    patterns: network::ActivationTensor,
    y: DMatrix<f64>,
}

fn point(net: &PyNetwork, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, eps_act: f64) -> PyResult<Point> {
    let trace = network::forward(&net.inner, &dense(x)?).py()?;
    let patterns = network::activation_patterns(&trace, eps_act).py()?;
    Ok(Point { trace, patterns, y: matrix(y)? })
}

/// Minimum-loss formula at the network's current weights, by direct
/// projection and by the per-unit decomposition.
#[pyfunction]
#[pyo3(signature = (net, x, y, cutoff = "press", eps_act = DEFAULT_EPS_ACT))]
fn compute_j<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    cutoff: &str,
    eps_act: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let c = self::cutoff(cutoff)?;
    let p = point(net, x, y, eps_act)?;
    let report = py.detach(|| formula::compute_j(&p.trace, &p.patterns, &net.inner, &p.y, c)).py()?;
    to_dict(py, &report)
}

/// Certificate of weak or strong structure, or None.
#[pyfunction]
#[pyo3(signature = (net, x, t, n = None, kind = "weak", tol = 1e-9))]
fn detect_structure<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    x: Vec<Vec<f64>>,
    t: usize,
    n: Option<usize>,
    kind: &str,
    tol: f64,
) -> PyResult<Option<Bound<'py, PyAny>>> {
    let kind: StructureKind = kind.parse().py()?;
    let trace = network::forward(&net.inner, &dense(x)?).py()?;
    let n = n.unwrap_or(net.inner.arch().output_dim);
    structure::detect_structure(&trace, &net.inner, n, t, kind, tol)
        .map(|cert| to_dict(py, &cert))
        .transpose()
}

/// Upper bound on the loss for layer subset `s`. `form` is "regression"
/// (weak structure), "grouped" (weak, grouped by layer) or "strong".
#[pyfunction]
#[pyo3(signature = (net, x, y, cert, s, form = "regression", cutoff = "press"))]
#[allow(clippy::too_many_arguments)]
fn loss_bound<'py>(
    py: Python<'py>,
    net: &PyNetwork,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    cert: &Bound<'py, PyAny>,
    s: Vec<usize>,
    form: &str,
    cutoff: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let text: String = py.import("json")?.call_method1("dumps", (cert,))?.extract()?;
    let cert: StructureCert = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("bad certificate: {e}")))?;
    let c = self::cutoff(cutoff)?;
    let p = point(net, x, y, DEFAULT_EPS_ACT)?;
    let f = match form {
        "regression" => structure::theorem2_bound,
        "grouped" => structure::corollary1_bound,
        "strong" => structure::corollary2_bound,
        _ => return Err(PyValueError::new_err(format!("unknown bound form {form:?}"))),
    };
    let report = f(&p.trace, &p.patterns, &net.inner, &p.y, &cert, &s, c).py()?;
    to_dict(py, &report)
}

/// Synthetic regression data from a random tanh teacher: `(x, y)`.
#[pyfunction]
#[pyo3(signature = (depth = 3, width = 16, input_dim = 6, output_dim = 1, samples = 512, seed = 0))]
fn gen_synthetic(
    depth: usize,
    width: usize,
    input_dim: usize,
    output_dim: usize,
    samples: usize,
    seed: u64,
) -> PyResult<(Rows, Rows)> {
    let cfg = SyntheticConfig { depth, width, input_dim, output_dim, samples, seed };
    let (x, y) = gen_core(&cfg).py()?;
    Ok((rows_of(x.inner()), rows_of(&y)))
}

/// Random activation-pattern rank experiment; returns the summary dict.
#[pyfunction]
#[pyo3(signature = (regime, m, d_x, d, trials = 100, seed = 0, pattern = "relu", cutoff = "press"))]
#[allow(clippy::too_many_arguments)]
fn rank_experiment<'py>(
    py: Python<'py>,
    regime: &str,
    m: usize,
    d_x: usize,
    d: usize,
    trials: usize,
    seed: u64,
    pattern: &str,
    cutoff: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let regime: Regime = regime.parse().py()?;
    let mut cfg = RankExperimentConfig::new(regime, m, d_x, d, trials, seed);
    cfg.pattern = pattern.parse::<PatternKind>().py()?;
    cfg.criterion = self::cutoff(cutoff)?;
    let exp = py.detach(|| random_lab::rank_experiment(&cfg)).py()?;
    to_dict(py, &exp.summary)
}

/// Monte Carlo frequency of both chi-square deviation tails against `e^{-t}`.
#[pyfunction]
#[pyo3(signature = (weights, t, trials = 1_000_000, seed = 0))]
fn chi_square_tail_check<'py>(py: Python<'py>, weights: Vec<f64>, t: f64, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let check = py.detach(|| random_lab::chi_square_tail_check(&weights, t, trials, seed)).py()?;
    to_dict(py, &check)
}

/// The four identity suites; a list of dicts with a `passed` flag each.
#[pyfunction]
#[pyo3(signature = (cases = 100, seed = 0, cutoff = "press"))]
fn lemma_check<'py>(py: Python<'py>, cases: usize, seed: u64, cutoff: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = self::cutoff(cutoff)?;
    let checks = py.detach(|| identities::run_all(cases, seed, c)).py()?;
    to_dict(py, &checks)
}

/// Child seed for `path` under `base`.
#[pyfunction]
fn derive_seed(base: u64, path: Vec<u64>) -> u64 {
    seed::derive_seed(base, &path)
}

#[pymodule]
fn minima(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(compute_j, m)?)?;
    m.add_function(wrap_pyfunction!(detect_structure, m)?)?;
    m.add_function(wrap_pyfunction!(loss_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(rank_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square_tail_check, m)?)?;
    m.add_function(wrap_pyfunction!(lemma_check, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
