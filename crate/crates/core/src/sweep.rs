//! Depth × width grid of `√J` at initialization and after training, with
//! CSV and SVG heat-map output.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::io::{format_value, read_matrix};
use crate::linalg::{CutoffCriterion, DenseMatrix};
use crate::minima::{d_blocks_bytes, j_direct, DEFAULT_MEMORY_CAP};
use crate::network::{
    activation_patterns, forward, gradient_from_trace, init_params, loss, ActivationKind, NetworkArch, NetworkParams,
    DEFAULT_EPS_ACT,
};
use crate::random_lab::write_json;
use crate::seed::derive_seed;
use crate::synthetic::{gen_synthetic, SyntheticConfig};
use crate::trainer::{train_sgd, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// CSV or binary matrices, one sample per row.
    Files { x: PathBuf, y: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::desk())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<(DenseMatrix, DMatrix<f64>)> {
        match self {
            DataSource::Synthetic(cfg) => gen_synthetic(cfg),
            DataSource::Files { x, y } => {
                let xm = read_matrix(x)?;
                let ym = read_matrix(y)?.into_inner();
                if ym.nrows() != xm.nrows() {
                    return Err(Error::shape("target rows", xm.nrows(), ym.nrows()));
                }
                Ok((xm, ym))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyzeAt {
    Init,
    Trained,
    #[default]
    Both,
}

impl AnalyzeAt {
    fn includes(self, phase: Phase) -> bool {
        matches!((self, phase), (AnalyzeAt::Both, _) | (AnalyzeAt::Init, Phase::Init) | (AnalyzeAt::Trained, Phase::Trained))
    }
}

impl FromStr for AnalyzeAt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "init" => Ok(AnalyzeAt::Init),
            "trained" => Ok(AnalyzeAt::Trained),
            "both" => Ok(AnalyzeAt::Both),
            other => Err(Error::InvalidArgument(format!("unknown phase selection {other:?} (init, trained, both)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Trained,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Trained => "trained",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub data: DataSource,
    pub train: TrainConfig,
    pub analyze_at: AnalyzeAt,
    pub seed: u64,
    pub out: PathBuf,
    pub activation: ActivationKind,
    pub criterion: CutoffCriterion,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec![1, 2, 3],
            widths: vec![2, 4, 8, 16],
            data: DataSource::default(),
            // 25 updates per epoch on 512 samples, as batch 200 gives on 5000.
            train: TrainConfig { batch_size: 20, ..TrainConfig::synthetic() },
            analyze_at: AnalyzeAt::Both,
            seed: 0,
            out: PathBuf::from("sweep"),
            activation: ActivationKind::Relu,
            criterion: CutoffCriterion::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
    }

    /// Checks the grid against the data shape and the block memory cap.
    pub fn validate(&self, input_dim: usize, output_dim: usize, samples: usize) -> Result<()> {
        if self.depths.is_empty() || self.widths.is_empty() {
            return Err(Error::InvalidArgument("sweep grid needs at least one depth and one width".into()));
        }
        if self.depths.contains(&0) || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("sweep depths and widths must be positive".into()));
        }
        self.train.validate()?;
        for &h in &self.depths {
            for &d in &self.widths {
                let mut widths = vec![input_dim];
                widths.extend(std::iter::repeat_n(d, h));
                widths.push(output_dim);
                let bytes = d_blocks_bytes(&widths, samples);
                if bytes > DEFAULT_MEMORY_CAP {
                    return Err(Error::TooLarge {
                        what: format!("cell H={h}, d={d}"),
                        needed_bytes: bytes as u64,
                        cap_bytes: DEFAULT_MEMORY_CAP as u64,
                    });
                }
            }
        }
        Ok(())
    }
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub H: usize,
    pub d: usize,
    pub phase: Phase,
    /// `√J_direct`; NaN when `error` is set.
    pub sqrt_J: f64,
    pub L: f64,
    pub grad_norm: f64,
    pub error: Option<String>,
}

impl SweepCell {
    fn failed(h: usize, d: usize, phase: Phase, e: &Error) -> Self {
        SweepCell { H: h, d, phase, sqrt_J: f64::NAN, L: f64::NAN, grad_norm: f64::NAN, error: Some(e.to_string()) }
    }
}

/// `(√J, L, ‖∇L‖)` at a point.
pub fn analyze_point(
    params: &NetworkParams,
    x: &DenseMatrix,
    y: &DMatrix<f64>,
    c: CutoffCriterion,
) -> Result<(f64, f64, f64)> {
    let trace = forward(params, x)?;
    let patterns = activation_patterns(&trace, DEFAULT_EPS_ACT)?;
    let j = j_direct(&trace, &patterns, params, y, c)?;
    let l = loss(&trace, y)?;
    let g = gradient_from_trace(params, &trace, &patterns, y)?.norm();
    Ok((j.max(0.0).sqrt(), l, g))
}

/// Runs every cell on up to `jobs` threads (0 = rayon default). Cells come
/// back in grid order: depth, then width, then phase.
pub fn run_sweep(cfg: &SweepConfig, x: &DenseMatrix, y: &DMatrix<f64>, jobs: usize) -> Result<Vec<SweepCell>> {
    cfg.validate(x.ncols(), y.ncols(), x.nrows())?;
    let grid: Vec<(usize, usize)> = cfg.depths.iter().flat_map(|&h| cfg.widths.iter().map(move |&d| (h, d))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} worker threads: {e}")))?;
    let cells: Vec<Vec<SweepCell>> = pool.install(|| grid.par_iter().map(|&(h, d)| run_cell(cfg, x, y, h, d)).collect());
    Ok(cells.into_iter().flatten().collect())
}

fn run_cell(cfg: &SweepConfig, x: &DenseMatrix, y: &DMatrix<f64>, h: usize, d: usize) -> Vec<SweepCell> {
    let mut out = Vec::with_capacity(2);
    let cell = |phase, r: Result<(f64, f64, f64)>| match r {
        Ok((sqrt_j, l, g)) => SweepCell { H: h, d, phase, sqrt_J: sqrt_j, L: l, grad_norm: g, error: None },
        Err(e) => SweepCell::failed(h, d, phase, &e),
    };
    let init = NetworkArch::uniform(x.ncols(), vec![d; h], y.ncols(), cfg.activation)
        .and_then(|arch| init_params(&arch, derive_seed(cfg.seed, &[h as u64, d as u64]), 1.0));
    let init = match init {
        Ok(p) => p,
        Err(e) => {
            return [Phase::Init, Phase::Trained]
                .into_iter()
                .filter(|&p| cfg.analyze_at.includes(p))
                .map(|p| SweepCell::failed(h, d, p, &e))
                .collect()
        }
    };
    if cfg.analyze_at.includes(Phase::Init) {
        out.push(cell(Phase::Init, analyze_point(&init, x, y, cfg.criterion)));
    }
    if cfg.analyze_at.includes(Phase::Trained) {
        let train = TrainConfig { seed: derive_seed(cfg.train.seed, &[h as u64, d as u64]), ..cfg.train.clone() };
        let r = train_sgd(&init, x, y, &train).and_then(|(p, _)| analyze_point(&p, x, y, cfg.criterion));
        out.push(cell(Phase::Trained, r));
    }
    out
}

/// Median `√J` over depths for each width, skipping failed cells.
pub fn width_medians(cells: &[SweepCell], phase: Phase) -> Vec<(usize, f64)> {
    let mut by_width: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.phase == phase && c.error.is_none()) {
        by_width.entry(c.d).or_default().push(c.sqrt_J);
    }
    by_width
        .into_iter()
        .map(|(d, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            (d, med)
        })
        .collect()
}

/// Differences in `√J` below this are rounding (a full-rank block matrix
/// leaves `√J ≈ 1e-13`).
pub const SQRT_J_TIE_TOL: f64 = 1e-6;

/// Fraction of grid points whose trained `√J` is at most the initial one
/// (up to [`SQRT_J_TIE_TOL`]), over points where both phases succeeded.
pub fn trained_not_worse_fraction(cells: &[SweepCell]) -> f64 {
    let init: BTreeMap<(usize, usize), f64> = cells
        .iter()
        .filter(|c| c.phase == Phase::Init && c.error.is_none())
        .map(|c| ((c.H, c.d), c.sqrt_J))
        .collect();
    let pairs: Vec<bool> = cells
        .iter()
        .filter(|c| c.phase == Phase::Trained && c.error.is_none())
        .filter_map(|c| init.get(&(c.H, c.d)).map(|&i| c.sqrt_J <= i + SQRT_J_TIE_TOL))
        .collect();
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|&&b| b).count() as f64 / pairs.len() as f64
}

pub fn cells_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("H,d,phase,sqrt_J,L,grad_norm,error\n");
    for c in cells {
        let err = c.error.as_deref().map(|e| format!("\"{}\"", e.replace('"', "\"\""))).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.H,
            c.d,
            c.phase,
            format_value(c.sqrt_J),
            format_value(c.L),
            format_value(c.grad_norm),
            err
        );
    }
    s
}

const CELL_PX: usize = 64;
const MARGIN_PX: usize = 56;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear white-to-navy ramp, `t ∈ [0, 1]`.
fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 29.0), lerp(255.0, 88.0))
}

/// Heat map of one phase: depth on the vertical axis (largest at the top),
/// width on the horizontal one. The color scale runs linearly from 0 to the
/// largest finite `√J`, which is returned and stored in the metadata.
pub fn heatmap_svg(cells: &[SweepCell], phase: Phase, depths: &[usize], widths: &[usize]) -> (String, f64) {
    let mut depths = depths.to_vec();
    let mut widths = widths.to_vec();
    depths.sort_unstable();
    depths.dedup();
    widths.sort_unstable();
    widths.dedup();
    let pick: BTreeMap<(usize, usize), &SweepCell> =
        cells.iter().filter(|c| c.phase == phase).map(|c| ((c.H, c.d), c)).collect();
    let max = pick.values().filter(|c| c.error.is_none() && c.sqrt_J.is_finite()).map(|c| c.sqrt_J).fold(0.0, f64::max);
    let (w, h) = (2 * MARGIN_PX + CELL_PX * widths.len(), 2 * MARGIN_PX + CELL_PX * depths.len());
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<metadata>{{"phase":"{phase}","scale":"linear","min_sqrt_J":0,"max_sqrt_J":{}}}</metadata>"#, format_value(max));
    let _ = writeln!(s, r#"<title>sqrt(J) at {phase}, max {}</title>"#, format_value(max));
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11" text-anchor="middle">"#);
    for (row, &depth) in depths.iter().rev().enumerate() {
        for (col, &width) in widths.iter().enumerate() {
            let (cx, cy) = (MARGIN_PX + col * CELL_PX, MARGIN_PX + row * CELL_PX);
            let (fill, label) = match pick.get(&(depth, width)) {
                Some(c) if c.error.is_none() => (ramp(if max > 0.0 { c.sqrt_J / max } else { 0.0 }), format!("{:.3}", c.sqrt_J)),
                Some(c) => ("#bbbbbb".to_string(), format!("error: {}", xml_escape(c.error.as_deref().unwrap_or("")))),
                None => ("#eeeeee".to_string(), "missing".to_string()),
            };
            let short = if label.starts_with("error") { "err".to_string() } else { label.clone() };
            let _ = writeln!(
                s,
                r##"<rect class="cell" data-depth="{depth}" data-width="{width}" x="{cx}" y="{cy}" width="{CELL_PX}" height="{CELL_PX}" fill="{fill}" stroke="#333333"><title>H={depth} d={width}: {label}</title></rect>""##
            );
            let _ = writeln!(s, r#"<text x="{}" y="{}">{short}</text>"#, cx + CELL_PX / 2, cy + CELL_PX / 2 + 4);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}">{depth}</text>"#, MARGIN_PX / 2, MARGIN_PX + row * CELL_PX + CELL_PX / 2 + 4);
    }
    for (col, &width) in widths.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}">{width}</text>"#, MARGIN_PX + col * CELL_PX + CELL_PX / 2, h - MARGIN_PX / 2);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}">width</text>"#, w / 2, h - 8);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})">depth</text>"#, h / 2, h / 2);
    let _ = writeln!(s, "</g>\n</svg>");
    (s, max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config: SweepConfig,
    pub cells: usize,
    pub failed_cells: usize,
    /// Upper end of each heat map's color scale, by phase.
    pub max_sqrt_j: BTreeMap<Phase, f64>,
}

/// Writes `cells.csv`, `heatmap_<phase>.svg` for each phase present and
/// `manifest.json` into `dir`.
pub fn write_sweep_outputs(dir: impl AsRef<Path>, cfg: &SweepConfig, cells: &[SweepCell]) -> Result<SweepManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("cells.csv");
    fs::write(&path, cells_csv(cells)).map_err(|e| Error::io(&path, e))?;
    let mut max_sqrt_j = BTreeMap::new();
    for phase in [Phase::Init, Phase::Trained] {
        if !cells.iter().any(|c| c.phase == phase) {
            continue;
        }
        let (svg, max) = heatmap_svg(cells, phase, &cfg.depths, &cfg.widths);
        let path = dir.join(format!("heatmap_{phase}.svg"));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        max_sqrt_j.insert(phase, max);
    }
    let manifest = SweepManifest {
        config: cfg.clone(),
        cells: cells.len(),
        failed_cells: cells.iter().filter(|c| c.error.is_some()).count(),
        max_sqrt_j,
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
