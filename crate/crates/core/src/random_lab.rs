//! Monte Carlo checks of the random-data predictions for one-hidden-layer
//! nets: the rank of the pattern-weighted input matrix, the law of the
//! remaining loss fraction, and chi-square tail bounds.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::io::format_value;
use crate::linalg::{column_space_basis, numerical_rank, singular_values, CutoffCriterion, DenseMatrix};
use crate::seed::derive_seed;

/// Per-sample derivative patterns, `m × d`, entries in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternMatrix(DenseMatrix);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// Fair coin over `{0, 1}`.
    Relu,
    /// Fair coin over `{-1, 1}`.
    Abs,
    /// Fair coin over `{slope, 1}`.
    Leaky { slope: f64 },
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternKind::Relu => f.write_str("relu"),
            PatternKind::Abs => f.write_str("abs"),
            PatternKind::Leaky { slope } => write!(f, "leaky:{slope}"),
        }
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "relu" | "coin" => Ok(PatternKind::Relu),
            "abs" | "sign" => Ok(PatternKind::Abs),
            _ => match s.strip_prefix("leaky:").map(str::parse::<f64>) {
                Some(Ok(slope)) if slope.abs() <= 1.0 => Ok(PatternKind::Leaky { slope }),
                _ => Err(Error::InvalidArgument(format!("unknown pattern kind {s:?} (relu, abs, leaky:<slope>)"))),
            },
        }
    }
}

impl PatternMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if let Some((i, _)) = m.iter().enumerate().find(|(_, v)| v.abs() > 1.0) {
            let (row, col) = (i % m.nrows(), i / m.nrows());
            return Err(Error::InvalidArgument(format!(
                "pattern entry ({row}, {col}) = {} exceeds 1 in absolute value",
                m[(row, col)]
            )));
        }
        Ok(PatternMatrix(m))
    }

    pub fn sample(m: usize, d: usize, kind: PatternKind, rng: &mut impl Rng) -> Self {
        let (lo, hi) = match kind {
            PatternKind::Relu => (0.0, 1.0),
            PatternKind::Abs => (-1.0, 1.0),
            PatternKind::Leaky { slope } => (slope, 1.0),
        };
        let data = DMatrix::from_fn(m, d, |_, _| if rng.random::<bool>() { hi } else { lo });
        PatternMatrix(DenseMatrix::new(data).expect("finite pattern"))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn units(&self) -> usize {
        self.0.ncols()
    }
}

pub fn sample_gaussian(m: usize, cols: usize, seed: u64) -> Result<DenseMatrix> {
    if m == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("gaussian sample needs positive shape, got {m}x{cols}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian_from(&mut rng, m, cols))
}

fn gaussian_from(rng: &mut impl Rng, m: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(DMatrix::from_fn(m, cols, |_, _| StandardNormal.sample(rng))).expect("finite normals")
}

/// `[diag(Λ_1) X … diag(Λ_d) X]`
pub fn build_dtilde(lambda: &PatternMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    let m = lambda.rows();
    if x.nrows() != m {
        return Err(Error::shape("pattern and input rows", m, x.nrows()));
    }
    let dx = x.ncols();
    let lam = lambda.matrix();
    let out = DMatrix::from_fn(m, lambda.units() * dx, |i, c| lam[(i, c / dx)] * x[(i, c % dx)]);
    DenseMatrix::new(out)
}

/// `½‖P_N[D̃] Y‖²` for a single target column.
pub fn shallow_min_loss(lambda: &PatternMatrix, x: &DenseMatrix, y: &DMatrix<f64>, c: CutoffCriterion) -> Result<f64> {
    if y.ncols() != 1 || y.nrows() != x.nrows() {
        return Err(Error::shape("targets", format!("{}x1", x.nrows()), format!("{}x{}", y.nrows(), y.ncols())));
    }
    let d = build_dtilde(lambda, x)?;
    let b = column_space_basis(&d, c)?;
    Ok(0.5 * b.project_null_columns(y)?.norm_squared())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `d_x·d ≪ m`
    Underparam,
    /// `d_x·d ≫ m`
    Overparam,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Underparam => "underparam",
            Regime::Overparam => "overparam",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "under" | "underparam" => Ok(Regime::Underparam),
            "over" | "overparam" => Ok(Regime::Overparam),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?} (under, over)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTrialResult {
    pub trial: usize,
    pub seed: u64,
    pub regime: Regime,
    pub m: usize,
    pub d_x: usize,
    pub d: usize,
    pub observed_rank: usize,
    pub smallest_singular_value: f64,
    /// `‖P_N[D̃] y‖² / ‖y‖²`
    pub loss_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankExperimentConfig {
    pub regime: Regime,
    pub m: usize,
    pub d_x: usize,
    pub d: usize,
    pub trials: usize,
    pub seed: u64,
    pub criterion: CutoffCriterion,
    pub pattern: PatternKind,
    /// Random index sets per trial for the pattern condition probe.
    pub probe_samples: usize,
}

impl Default for RankExperimentConfig {
    fn default() -> Self {
        RankExperimentConfig::new(Regime::Underparam, 4096, 4, 4, 100, 0)
    }
}

impl RankExperimentConfig {
    pub fn new(regime: Regime, m: usize, d_x: usize, d: usize, trials: usize, seed: u64) -> Self {
        RankExperimentConfig {
            regime,
            m,
            d_x,
            d,
            trials,
            seed,
            criterion: CutoffCriterion::PressEtAl,
            pattern: PatternKind::Relu,
            probe_samples: 20,
        }
    }
}

/// The size conditions of the two regimes evaluated at the observed `δ`.
/// Reported, never enforced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeConditions {
    pub delta: f64,
    /// `64 ln²(d_x d m / δ²) d_x d`, to be at most `m`.
    pub under_required_m: f64,
    pub under_satisfied: bool,
    /// `2 m ln²(m d / δ)`, to be at most `d·d_x`.
    pub over_required_dxd: f64,
    /// `ln²(d m)`, to be at most `d_x`.
    pub over_required_dx: f64,
    pub over_satisfied: bool,
}

impl SizeConditions {
    pub fn evaluate(m: usize, d_x: usize, d: usize, delta: f64) -> Self {
        let (mf, dxf, df) = (m as f64, d_x as f64, d as f64);
        let under_required_m = 64.0 * (dxf * df * mf / (delta * delta)).ln().powi(2) * dxf * df;
        let over_required_dxd = 2.0 * mf * (mf * df / delta).ln().powi(2);
        let over_required_dx = (df * mf).ln().powi(2);
        SizeConditions {
            delta,
            under_required_m,
            under_satisfied: delta > 0.0 && mf >= under_required_m,
            over_required_dxd,
            over_required_dx,
            over_satisfied: delta > 0.0 && dxf * df >= over_required_dxd && dxf >= over_required_dx,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub config: RankExperimentConfig,
    /// `min(d_x·d, m)`
    pub target_rank: usize,
    pub full_rank_fraction: f64,
    pub loss_ratio_mean: f64,
    pub loss_ratio_std_error: f64,
    pub loss_ratio_min: f64,
    pub loss_ratio_max: f64,
    /// `(m − d_x d)/m` clipped at zero.
    pub predicted_loss_ratio: f64,
    /// Smallest `s_min(Λ_I)` seen by the probe over all trials.
    pub delta_estimate: f64,
    pub size_conditions: SizeConditions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankExperiment {
    pub trials: Vec<RankTrialResult>,
    pub summary: RankSummary,
}

/// One trial per derived seed: fresh `Λ`, `X` and `y`. Trials run in
/// parallel and are returned in index order.
pub fn rank_experiment(cfg: &RankExperimentConfig) -> Result<RankExperiment> {
    if cfg.trials == 0 || cfg.m == 0 || cfg.d_x == 0 || cfg.d == 0 {
        return Err(Error::InvalidArgument("rank experiment needs positive m, d_x, d and trials".into()));
    }
    let outcomes: Vec<(RankTrialResult, f64)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, trial))
        .collect::<Result<_>>()?;
    let delta = outcomes.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    let trials: Vec<RankTrialResult> = outcomes.into_iter().map(|o| o.0).collect();

    let target_rank = (cfg.d_x * cfg.d).min(cfg.m);
    let n = trials.len() as f64;
    let ratios: Vec<f64> = trials.iter().map(|t| t.loss_ratio).collect();
    let mean = ratios.iter().sum::<f64>() / n;
    let var = if trials.len() > 1 {
        ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let summary = RankSummary {
        config: cfg.clone(),
        target_rank,
        full_rank_fraction: trials.iter().filter(|t| t.observed_rank == target_rank).count() as f64 / n,
        loss_ratio_mean: mean,
        loss_ratio_std_error: (var / n).sqrt(),
        loss_ratio_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        loss_ratio_max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        predicted_loss_ratio: (cfg.m.saturating_sub(cfg.d_x * cfg.d)) as f64 / cfg.m as f64,
        delta_estimate: delta,
        size_conditions: SizeConditions::evaluate(cfg.m, cfg.d_x, cfg.d, delta),
    };
    Ok(RankExperiment { trials, summary })
}

fn run_trial(cfg: &RankExperimentConfig, trial: usize) -> Result<(RankTrialResult, f64)> {
    let seed = derive_seed(cfg.seed, &[trial as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = PatternMatrix::sample(cfg.m, cfg.d, cfg.pattern, &mut rng);
    let x = gaussian_from(&mut rng, cfg.m, cfg.d_x);
    let y = gaussian_from(&mut rng, cfg.m, 1);
    let dt = build_dtilde(&lambda, &x)?;
    let (rank, _) = numerical_rank(&dt, cfg.criterion)?;
    let sv = singular_values(&dt)?;
    let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let basis = column_space_basis(&dt, cfg.criterion)?;
    let loss_ratio = basis.project_null_columns(&y)?.norm_squared() / y.norm_squared();
    let probe = pattern_condition_probe(&lambda, cfg.regime, cfg.probe_samples, derive_seed(seed, &[1]))?;
    let result = RankTrialResult {
        trial,
        seed,
        regime: cfg.regime,
        m: cfg.m,
        d_x: cfg.d_x,
        d: cfg.d,
        observed_rank: rank,
        smallest_singular_value: smallest,
        loss_ratio,
    };
    Ok((result, probe.min_smin))
}

/// One CSV row per trial plus `summary.json` in `dir`.
pub fn write_rank_outputs(dir: impl AsRef<Path>, exp: &RankExperiment) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("trials.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record([
        "trial",
        "seed",
        "regime",
        "m",
        "d_x",
        "d",
        "observed_rank",
        "smallest_singular_value",
        "loss_ratio",
    ])
    .map_err(|e| csv_error(&path, e))?;
    for t in &exp.trials {
        w.write_record([
            t.trial.to_string(),
            t.seed.to_string(),
            t.regime.to_string(),
            t.m.to_string(),
            t.d_x.to_string(),
            t.d.to_string(),
            t.observed_rank.to_string(),
            format_value(t.smallest_singular_value),
            format_value(t.loss_ratio),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(dir.join("summary.json"), &exp.summary)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub min_smin: f64,
    pub index_sizes: Vec<usize>,
}

/// Smallest singular value of `Λ_I` over random row subsets `I`, with
/// `|I| ≥ m/2` in the underparameterized regime and `|I| ≤ d/2` in the
/// overparameterized one. A spot check, not a bound over all `I`.
pub fn pattern_condition_probe(lambda: &PatternMatrix, regime: Regime, samples: usize, seed: u64) -> Result<ProbeResult> {
    let (m, d) = (lambda.rows(), lambda.units());
    if m == 0 || d == 0 || samples == 0 {
        return Err(Error::InvalidArgument("probe needs a nonempty pattern and at least one sample".into()));
    }
    let (lo, hi) = match regime {
        Regime::Underparam => (m.div_ceil(2), m),
        Regime::Overparam => (1, (d / 2).clamp(1, m)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_smin = f64::INFINITY;
    let mut index_sizes = Vec::with_capacity(samples);
    for _ in 0..samples {
        let size = rng.random_range(lo..=hi);
        let rows = sample(&mut rng, m, size).into_vec();
        let sub = lambda.matrix().select_rows(&rows);
        let sv = singular_values(&sub)?;
        min_smin = min_smin.min(sv.iter().copied().fold(f64::INFINITY, f64::min));
        index_sizes.push(size);
    }
    Ok(ProbeResult { min_smin, index_sizes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    /// Deviation the sum is compared against.
    pub threshold: f64,
    pub empirical: f64,
    pub std_error: f64,
    /// `e^{-t}`
    pub bound: f64,
    /// `empirical ≤ bound + 3·std_error`
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub n: usize,
    pub t: f64,
    pub trials: usize,
    pub seed: u64,
    pub upper: TailEstimate,
    pub lower: TailEstimate,
}

const TAIL_CHUNK: usize = 1 << 16;

/// Frequency of `Σ a_i²(g_i² − 1) > 2√t‖a²‖ + 2K²t` and of
/// `Σ a_i²(g_i² − 1) < −2√t‖a²‖`, `K = max a_i`, over `trials` draws of
/// standard normal `g`.
pub fn chi_square_tail_check(weights: &[f64], t: f64, trials: usize, seed: u64) -> Result<TailCheck> {
    if weights.is_empty() || trials == 0 || !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument("tail check needs weights, trials and a positive finite t".into()));
    }
    if let Some(a) = weights.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!("weights must be finite and nonnegative, got {a}")));
    }
    let k = weights.iter().copied().fold(0.0, f64::max);
    let sq: Vec<f64> = weights.iter().map(|a| a * a).collect();
    let spread = 2.0 * t.sqrt() * sq.iter().map(|s| s * s).sum::<f64>().sqrt();
    let upper_at = spread + 2.0 * k * k * t;
    let lower_at = -spread;

    let chunks = trials.div_ceil(TAIL_CHUNK);
    let counts: Vec<(usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
            let len = TAIL_CHUNK.min(trials - c * TAIL_CHUNK);
            let (mut up, mut down) = (0, 0);
            for _ in 0..len {
                let s: f64 = sq
                    .iter()
                    .map(|a2| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        a2 * (g * g - 1.0)
                    })
                    .sum();
                up += usize::from(s > upper_at);
                down += usize::from(s < lower_at);
            }
            (up, down)
        })
        .collect();
    let (up, down) = counts.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    let estimate = |hits: usize, threshold: f64| {
        let p = hits as f64 / trials as f64;
        let std_error = (p * (1.0 - p) / trials as f64).sqrt();
        let bound = (-t).exp();
        TailEstimate { threshold, empirical: p, std_error, bound, within_bound: p <= bound + 3.0 * std_error }
    };
    Ok(TailCheck {
        n: weights.len(),
        t,
        trials,
        seed,
        upper: estimate(up, upper_at),
        lower: estimate(down, lower_at),
    })
}

/// Draws of `(z_1² + … + z_k²)/(z_1² + … + z_m²)` for standard normal `z`.
pub fn chi_square_ratio_reference(m: usize, k: usize, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if m == 0 || k > m {
        return Err(Error::InvalidArgument(format!("need 0 < m and k ≤ m, got m={m}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..draws)
        .map(|_| {
            let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            let head: f64 = z[..k].iter().map(|v| v * v).sum();
            head / (head + z[k..].iter().map(|v| v * v).sum::<f64>())
        })
        .collect())
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("KS statistic needs two nonempty samples without NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut dist) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        dist = dist.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(dist)
}

/// KS distance between the loss ratios of full-rank trials and a reference
/// sample of the chi-square ratio with `k = m − d_x·d`.
pub fn loss_ratio_ks(exp: &RankExperiment, draws: usize, seed: u64) -> Result<f64> {
    let s = &exp.summary;
    let observed: Vec<f64> = exp
        .trials
        .iter()
        .filter(|t| t.observed_rank == s.target_rank)
        .map(|t| t.loss_ratio)
        .collect();
    let k = s.config.m - s.target_rank;
    let reference = chi_square_ratio_reference(s.config.m, k, draws, seed)?;
    ks_statistic(&observed, &reference)
}
