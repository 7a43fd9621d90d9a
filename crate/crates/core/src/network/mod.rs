//! Bias-free fully connected feedforward networks: forward pass, activation
//! patterns, squared loss and its gradient.
//!
//! Layers are indexed as in the model `Ŷ = Φ^(H) W^(H+1)`: `Φ^(0) = X`,
//! hidden layers `1..=H`, output layer `H+1`. Units inside a layer are
//! 0-based.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub mod io;

/// Preactivations with `|z| <= DEFAULT_EPS_ACT` are treated as sitting on
/// an activation kink.
pub const DEFAULT_EPS_ACT: f64 = 1e-12;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu { slope: f64 },
    Abs,
    Linear,
    /// Only for synthesizing targets; networks using it cannot be analyzed.
    Tanh,
}

impl ActivationKind {
    pub fn validate(self) -> Result<()> {
        if let ActivationKind::LeakyRelu { slope } = self {
            if !slope.is_finite() || slope > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "leaky ReLU slope must be finite and at most 1, got {slope}"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::LeakyRelu { slope } => (slope * z).max(z),
            ActivationKind::Abs => z.abs(),
            ActivationKind::Linear => z,
            ActivationKind::Tanh => z.tanh(),
        }
    }

    /// Whether the activation is piecewise linear with a kink at zero.
    pub fn has_kink(self) -> bool {
        match self {
            ActivationKind::Relu | ActivationKind::Abs => true,
            ActivationKind::LeakyRelu { slope } => slope != 1.0,
            ActivationKind::Linear | ActivationKind::Tanh => false,
        }
    }

    /// Derivative at `z`, or `None` when `z` lies within `eps` of a kink.
    fn derivative(self, z: f64, eps: f64) -> Option<f64> {
        if self.has_kink() && z.abs() <= eps {
            return None;
        }
        Some(match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Abs => z.signum(),
            ActivationKind::Linear => 1.0,
            ActivationKind::Tanh => 1.0 - z.tanh().powi(2),
        })
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Relu => f.write_str("relu"),
            ActivationKind::LeakyRelu { slope } => write!(f, "leaky_relu:{slope}"),
            ActivationKind::Abs => f.write_str("abs"),
            ActivationKind::Linear => f.write_str("linear"),
            ActivationKind::Tanh => f.write_str("tanh"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    /// Accepts `relu`, `abs`, `linear`, `tanh`, `leaky_relu` and
    /// `leaky_relu:<slope>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let kind = match s.split_once(':') {
            Some(("leaky_relu", slope)) => ActivationKind::LeakyRelu {
                slope: slope
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad leaky ReLU slope {slope:?}")))?,
            },
            None => match s.as_str() {
                "relu" => ActivationKind::Relu,
                "leaky_relu" => ActivationKind::LeakyRelu {
                    slope: DEFAULT_LEAKY_SLOPE,
                },
                "abs" => ActivationKind::Abs,
                "linear" => ActivationKind::Linear,
                "tanh" => ActivationKind::Tanh,
                _ => return Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
            },
            _ => return Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// One activation per hidden layer.
    pub activations: Vec<ActivationKind>,
}

impl NetworkArch {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activations: Vec<ActivationKind>,
    ) -> Result<Self> {
        let arch = NetworkArch {
            input_dim,
            output_dim,
            hidden_widths,
            activations,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Same activation on every hidden layer.
    pub fn uniform(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: ActivationKind,
    ) -> Result<Self> {
        let acts = vec![activation; hidden_widths.len()];
        Self::new(input_dim, hidden_widths, output_dim, acts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("input and output dimensions must be at least 1".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be at least 1".into()));
        }
        if self.activations.len() != self.hidden_widths.len() {
            return Err(Error::shape(
                "NetworkArch activations",
                self.hidden_widths.len(),
                self.activations.len(),
            ));
        }
        self.activations.iter().try_for_each(|a| a.validate())
    }

    /// Number of hidden layers `H`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// `[d_0, d_1, …, d_H, d_{H+1}]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.depth() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: NetworkArch,
    weights: Vec<DenseMatrix>,
}

impl NetworkParams {
    pub fn new(arch: NetworkArch, weights: Vec<DenseMatrix>) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        if weights.len() != widths.len() - 1 {
            return Err(Error::shape("NetworkParams layer count", widths.len() - 1, weights.len()));
        }
        for (l, w) in weights.iter().enumerate() {
            let want = (widths[l], widths[l + 1]);
            if w.shape() != want {
                return Err(Error::shape(
                    "NetworkParams weight shape",
                    format!("W^({}) {}x{}", l + 1, want.0, want.1),
                    format!("{}x{}", w.nrows(), w.ncols()),
                ));
            }
        }
        Ok(NetworkParams { arch, weights })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    /// `W^(1) … W^(H+1)`; `weights()[l - 1]` is `W^(l)`.
    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn weight(&self, layer: usize) -> &DenseMatrix {
        &self.weights[layer - 1]
    }

    /// `θ = vec([W^(l)]_l)`, each block column-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .collect()
    }

    pub fn from_flat(arch: NetworkArch, theta: &[f64]) -> Result<Self> {
        if theta.len() != arch.param_count() {
            return Err(Error::shape("NetworkParams::from_flat", arch.param_count(), theta.len()));
        }
        let widths = arch.widths();
        let mut at = 0;
        let mut weights = Vec::with_capacity(widths.len() - 1);
        for p in widths.windows(2) {
            let n = p[0] * p[1];
            weights.push(DenseMatrix::new(DMatrix::from_column_slice(
                p[0],
                p[1],
                &theta[at..at + n],
            ))?);
            at += n;
        }
        NetworkParams::new(arch, weights)
    }

    /// Applies `f` to every weight matrix, producing a new parameter point.
    pub fn map_weights<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &DMatrix<f64>) -> DMatrix<f64>,
    {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| DenseMatrix::computed(f(i + 1, w), "weight update"))
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkParams {
            arch: self.arch.clone(),
            weights,
        })
    }
}

/// Entries of `W^(l)` are `Normal(0, (scale / √d_{l-1})²)`, drawn layer by
/// layer in column-major order from a ChaCha8 stream seeded with `seed`.
pub fn init_params(arch: &NetworkArch, seed: u64, scale: f64) -> Result<NetworkParams> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = arch.widths();
    let weights = widths
        .windows(2)
        .map(|p| {
            let normal = Normal::new(0.0, scale / (p[0] as f64).sqrt()).expect("std is positive");
            DenseMatrix::new(DMatrix::from_fn(p[0], p[1], |_, _| normal.sample(&mut rng)))
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkParams::new(arch.clone(), weights)
}

/// All intermediate matrices of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    activations: Vec<ActivationKind>,
    phi: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.activations.len()
    }

    pub fn samples(&self) -> usize {
        self.phi[0].nrows()
    }

    pub fn activations(&self) -> &[ActivationKind] {
        &self.activations
    }

    /// `Φ^(l)` for `l` in `0..=H+1`; `Φ^(0) = X` and `Φ^(H+1) = Ŷ`.
    pub fn phi(&self, layer: usize) -> &DenseMatrix {
        &self.phi[layer]
    }

    /// Preactivation `G^(l) = Φ^(l-1) W^(l)` for `l` in `1..=H+1`.
    pub fn preactivation(&self, layer: usize) -> &DenseMatrix {
        &self.pre[layer - 1]
    }

    pub fn input(&self) -> &DenseMatrix {
        &self.phi[0]
    }

    pub fn output(&self) -> &DenseMatrix {
        self.phi.last().expect("trace always has an output")
    }
}

pub fn forward(params: &NetworkParams, x: &DenseMatrix) -> Result<ForwardTrace> {
    let arch = params.arch();
    if x.ncols() != arch.input_dim {
        return Err(Error::shape("forward input columns", arch.input_dim, x.ncols()));
    }
    let h = arch.depth();
    let mut phi = Vec::with_capacity(h + 2);
    let mut pre = Vec::with_capacity(h + 1);
    phi.push(x.clone());
    for l in 1..=h + 1 {
        let g = phi[l - 1].inner() * params.weight(l).inner();
        let out = if l <= h {
            let act = arch.activations[l - 1];
            g.map(|z| act.apply(z))
        } else {
            g.clone()
        };
        pre.push(DenseMatrix::computed(g, "forward pass")?);
        phi.push(DenseMatrix::computed(out, "forward pass")?);
    }
    Ok(ForwardTrace {
        activations: arch.activations.clone(),
        phi,
        pre,
    })
}

/// Diagonals of the activation-pattern matrices `Λ^{l,k}`.
#[derive(Clone, Debug)]
pub struct ActivationTensor {
    lambda: Vec<DMatrix<f64>>,
    exact_zero_hits: usize,
    min_abs_preactivation: f64,
}

impl ActivationTensor {
    /// `m × d_l` matrix whose column `k` is the diagonal of `Λ^{l,k}`,
    /// for hidden layer `l` in `1..=H`.
    pub fn layer(&self, layer: usize) -> &DMatrix<f64> {
        &self.lambda[layer - 1]
    }

    pub fn value(&self, layer: usize, unit: usize, sample: usize) -> f64 {
        self.lambda[layer - 1][(sample, unit)]
    }

    pub fn depth(&self) -> usize {
        self.lambda.len()
    }

    /// Preactivations within `eps_act` of a kink; each was assigned `λ = 0`.
    pub fn exact_zero_hits(&self) -> usize {
        self.exact_zero_hits
    }

    /// Smallest `|G^(l)_{i,k}|` over hidden layers whose activation has a
    /// kink; infinite when no layer has one.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.min_abs_preactivation
    }

    pub fn is_differentiable(&self) -> bool {
        self.exact_zero_hits == 0
    }
}

/// A sample whose input row to layer `l` stays zero in a neighbourhood of
/// θ (an all-zero sample, or every unit below either strictly off under
/// ReLU or itself fed such a row) has preactivations pinned at zero. These
/// are not counted as kinks: no derivative flows through them on either
/// side, so the `λ` chosen there never enters a block or gradient.
pub fn activation_patterns(trace: &ForwardTrace, eps_act: f64) -> Result<ActivationTensor> {
    let mut hits = 0;
    let mut min_abs = f64::INFINITY;
    let mut lambda = Vec::with_capacity(trace.depth());
    let input = trace.input().inner();
    let mut pinned: Vec<bool> =
        (0..input.nrows()).map(|i| input.row(i).iter().all(|&v| v == 0.0)).collect();
    for (idx, &act) in trace.activations.iter().enumerate() {
        if act == ActivationKind::Tanh {
            return Err(Error::InvalidArgument(
                "tanh layers are for data generation only and have no activation pattern".into(),
            ));
        }
        let g = trace.preactivation(idx + 1).inner();
        let mut lam = DMatrix::zeros(g.nrows(), g.ncols());
        for i in 0..g.nrows() {
            let mut all_off = true;
            for k in 0..g.ncols() {
                let z = g[(i, k)];
                if pinned[i] {
                    lam[(i, k)] = act.derivative(z, eps_act).unwrap_or(0.0);
                    continue;
                }
                all_off &= act == ActivationKind::Relu && z < -eps_act;
                if act.has_kink() {
                    min_abs = min_abs.min(z.abs());
                }
                lam[(i, k)] = match act.derivative(z, eps_act) {
                    Some(d) => d,
                    None => {
                        hits += 1;
                        0.0
                    }
                };
            }
            pinned[i] = pinned[i] || all_off;
        }
        lambda.push(lam);
    }
    Ok(ActivationTensor {
        lambda,
        exact_zero_hits: hits,
        min_abs_preactivation: min_abs,
    })
}

fn check_target(trace: &ForwardTrace, y: &DMatrix<f64>) -> Result<()> {
    let out = trace.output();
    if y.shape() != out.shape() {
        return Err(Error::shape(
            "target shape",
            format!("{}x{}", out.nrows(), out.ncols()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    Ok(())
}

/// `½ ‖Ŷ − Y‖_F²`
pub fn loss(trace: &ForwardTrace, y: &DMatrix<f64>) -> Result<f64> {
    check_target(trace, y)?;
    Ok(0.5 * (trace.output().inner() - y).norm_squared())
}

#[derive(Clone, Debug)]
pub struct Gradient {
    /// `∂L/∂W^(l)`; entry `l - 1` for layer `l`.
    pub per_layer: Vec<DMatrix<f64>>,
    /// Set when some preactivation sat on a kink, making this one choice of
    /// subgradient (the `λ = 0` choice).
    pub subgradient: bool,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.per_layer
            .iter()
            .map(|g| g.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.per_layer
            .iter()
            .flat_map(|g| g.as_slice().iter().copied())
            .collect()
    }
}

/// Backpropagation of the squared loss using the pattern values as the
/// activation derivatives.
pub fn gradient_from_trace(
    params: &NetworkParams,
    trace: &ForwardTrace,
    patterns: &ActivationTensor,
    y: &DMatrix<f64>,
) -> Result<Gradient> {
    check_target(trace, y)?;
    let h = trace.depth();
    let mut per_layer = vec![DMatrix::zeros(0, 0); h + 1];
    let mut delta = trace.output().inner() - y;
    for l in (1..=h + 1).rev() {
        per_layer[l - 1] = trace.phi(l - 1).transpose() * &delta;
        if l > 1 {
            delta = (&delta * params.weight(l).transpose()).component_mul(patterns.layer(l - 1));
        }
    }
    Ok(Gradient {
        per_layer,
        subgradient: patterns.exact_zero_hits() > 0,
    })
}

pub fn gradient(params: &NetworkParams, x: &DenseMatrix, y: &DMatrix<f64>) -> Result<Gradient> {
    let trace = forward(params, x)?;
    let patterns = activation_patterns(&trace, DEFAULT_EPS_ACT)?;
    gradient_from_trace(params, &trace, &patterns, y)
}
