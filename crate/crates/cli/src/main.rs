use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minima_core::identities;
use minima_core::linalg::io::read_matrix;
use minima_core::linalg::CutoffCriterion;
use minima_core::minima::compute_j;
use minima_core::network::io::load_params;
use minima_core::network::{activation_patterns, forward, DEFAULT_EPS_ACT};
use minima_core::random_lab::{rank_experiment, write_rank_outputs, PatternKind, RankExperimentConfig, Regime};
use minima_core::structure::{
    corollary1_bound, corollary2_bound, detect_structure, layer_subsets, theorem2_bound, StructureKind,
    DEFAULT_STRUCTURE_TOL,
};
use minima_core::sweep::{run_sweep, write_sweep_outputs, AnalyzeAt, DataSource, SweepConfig};
use minima_core::synthetic::{gen_synthetic, write_synthetic, SyntheticConfig};
use minima_core::Error;
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Loss values at differentiable local minima, structural bounds and
/// random-matrix checks.
#[derive(Parser, Debug)]
#[command(name = "minima", version)]
struct Cli {
    /// Base seed; overrides the seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rank cutoff criterion: press, golub or lapack.
    #[arg(long, global = true, value_parser = parse_cutoff)]
    cutoff: Option<CutoffCriterion>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration for gen-data, sweep or prop2.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Regression data from a random tanh teacher, written as x.csv and y.csv.
    GenData(GenDataArgs),
    /// Loss, J and per-unit contributions at a parameter point.
    Analyze(PointArgs),
    /// Depth x width grid of sqrt(J) with CSV and SVG heat maps.
    Sweep(SweepArgs),
    /// Structure detection and loss bounds at a parameter point.
    Bound(BoundArgs),
    /// Rank and loss-ratio Monte Carlo for one-hidden-layer pattern matrices.
    Prop2(Prop2Args),
    /// Randomized identity suites.
    LemmaCheck(LemmaArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Size preset: desk or full.
    #[arg(long)]
    preset: Option<String>,
    /// Teacher hidden layers.
    #[arg(long)]
    depth: Option<usize>,
    /// Teacher units per hidden layer.
    #[arg(long)]
    width: Option<usize>,
    /// Input dimension.
    #[arg(long)]
    dx: Option<usize>,
    /// Output dimension.
    #[arg(long)]
    dy: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct PointArgs {
    /// Parameter directory with manifest.json and layer_<l>.bin files.
    #[arg(long)]
    params: PathBuf,
    /// Input matrix, one sample per row (CSV or binary).
    #[arg(long)]
    x: PathBuf,
    /// Target matrix.
    #[arg(long)]
    y: PathBuf,
    /// Preactivations this close to a kink count as nondifferentiable.
    #[arg(long, default_value_t = DEFAULT_EPS_ACT)]
    eps_act: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated depths, e.g. "1,2,3".
    #[arg(long, value_parser = parse_list)]
    depths: Option<std::vec::Vec<usize>>,
    /// Comma-separated widths.
    #[arg(long, value_parser = parse_list)]
    widths: Option<std::vec::Vec<usize>>,
    /// init, trained or both.
    #[arg(long)]
    analyze_at: Option<String>,
    /// Input file; with --y replaces the synthetic data.
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    /// Target file.
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// SGD training epochs per cell.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[command(flatten)]
    point: PointArgs,
    /// weak or strong.
    #[arg(long, default_value = "weak")]
    structure: String,
    /// Lowest layer of the structure.
    #[arg(long)]
    t: usize,
    /// Comma-separated layer subset; every admissible subset when omitted.
    #[arg(long, value_parser = parse_list)]
    subset: Option<std::vec::Vec<usize>>,
    /// Minimum set size; defaults to the output dimension.
    #[arg(long)]
    n: Option<usize>,
    /// Relative tolerance for linear units and negligible edges.
    #[arg(long, default_value_t = DEFAULT_STRUCTURE_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct Prop2Args {
    /// under or over.
    #[arg(long)]
    regime: Option<String>,
    /// Samples.
    #[arg(long)]
    m: Option<usize>,
    /// Input dimension.
    #[arg(long)]
    dx: Option<usize>,
    /// Hidden units.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// relu, abs or leaky:<slope>.
    #[arg(long)]
    pattern: Option<String>,
}

#[derive(Args, Debug)]
struct LemmaArgs {
    /// Randomized cases per suite.
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

fn parse_cutoff(s: &str) -> Result<CutoffCriterion, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

/// What went wrong, with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            e if e.is_data_error() => EXIT_DATA,
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    if cli.config.is_some() && !matches!(cli.command, Command::GenData(_) | Command::Sweep(_) | Command::Prop2(_)) {
        return Err(usage("--config applies to gen-data, sweep and prop2 only"));
    }
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Analyze(a) => analyze(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Bound(a) => bound(cli, a),
        Command::Prop2(a) => prop2(cli, a),
        Command::LemmaCheck(a) => lemma_check(cli, a),
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(cli: &Cli) -> Result<T, Failure> {
    let Some(path) = &cli.config else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
    serde_json::from_str(&text).map_err(|e| Failure::from(Error::Json { path: path.clone(), source: e }))
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn criterion(cli: &Cli) -> CutoffCriterion {
    cli.cutoff.unwrap_or_default()
}

fn write_json(path: &Path, value: &Value) -> CmdResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))?;
    }
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(|e| Failure::from(Error::Io { path: path.to_path_buf(), source: e }))
}

/// Prints `value`, and writes it to `<out>/<name>` when --out is given.
fn emit(cli: &Cli, name: &str, value: &Value) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
    match &cli.out {
        Some(dir) => write_json(&dir.join(name), value),
        None => Ok(()),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CmdResult {
    let mut cfg: SyntheticConfig = match a.preset.as_deref() {
        None => read_config(cli)?,
        Some("desk") => SyntheticConfig::desk(),
        Some("full") => SyntheticConfig::full(),
        Some(other) => return Err(usage(format!("unknown preset {other:?} (desk, full)"))),
    };
    if a.preset.is_some() && cli.config.is_some() {
        return Err(usage("--preset and --config are exclusive"));
    }
    cfg.depth = a.depth.unwrap_or(cfg.depth);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.input_dim = a.dx.unwrap_or(cfg.input_dim);
    cfg.output_dim = a.dy.unwrap_or(cfg.output_dim);
    cfg.samples = a.samples.unwrap_or(cfg.samples);
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    let (x, y) = gen_synthetic(&cfg)?;
    let dir = out_dir(cli, "data");
    write_synthetic(&dir, &x, &y)?;
    let manifest = json!({
        "generator": "tanh teacher",
        "config": cfg,
        "desk_default": SyntheticConfig::desk(),
        "full_scale": SyntheticConfig::full(),
        "files": ["x.csv", "y.csv"],
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} samples to {}", cfg.samples, dir.display());
    Ok(())
}

struct Point {
    params: minima_core::network::NetworkParams,
    trace: minima_core::network::ForwardTrace,
    patterns: minima_core::network::ActivationTensor,
    y: nalgebra::DMatrix<f64>,
}

fn load_point(a: &PointArgs) -> Result<Point, Failure> {
    if a.eps_act.is_nan() || a.eps_act < 0.0 {
        return Err(usage(format!("--eps-act must be nonnegative, got {}", a.eps_act)));
    }
    let (params, _) = load_params(&a.params)?;
    let x = read_matrix(&a.x)?;
    let y = read_matrix(&a.y)?.into_inner();
    let trace = forward(&params, &x)?;
    let patterns = activation_patterns(&trace, a.eps_act)?;
    Ok(Point { params, trace, patterns, y })
}

fn analyze(cli: &Cli, a: &PointArgs) -> CmdResult {
    let p = load_point(a)?;
    let report = compute_j(&p.trace, &p.patterns, &p.params, &p.y, criterion(cli))?;
    emit(cli, "report.json", &serde_json::to_value(&report).expect("report serializes"))
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CmdResult {
    let mut cfg: SweepConfig = read_config(cli)?;
    if let Some(d) = &a.depths {
        cfg.depths = d.clone();
    }
    if let Some(w) = &a.widths {
        cfg.widths = w.clone();
    }
    if let Some(s) = &a.analyze_at {
        cfg.analyze_at = s.parse::<AnalyzeAt>()?;
    }
    if let (Some(x), Some(y)) = (&a.x, &a.y) {
        cfg.data = DataSource::Files { x: x.clone(), y: y.clone() };
    }
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
    cfg.train.learning_rate = a.learning_rate.unwrap_or(cfg.train.learning_rate);
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(c) = cli.cutoff {
        cfg.criterion = c;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let (x, y) = cfg.data.load()?;
    let cells = run_sweep(&cfg, &x, &y, cli.jobs)?;
    let manifest = write_sweep_outputs(&cfg.out, &cfg, &cells)?;
    eprintln!(
        "{} cells ({} failed) written to {}",
        manifest.cells,
        manifest.failed_cells,
        cfg.out.display()
    );
    Ok(())
}

fn bound(cli: &Cli, a: &BoundArgs) -> CmdResult {
    let kind: StructureKind = a.structure.parse()?;
    let p = load_point(&a.point)?;
    let h = p.params.arch().depth();
    if a.t > h {
        return Err(usage(format!("--t {} exceeds the depth {h}", a.t)));
    }
    let n = a.n.unwrap_or(p.params.arch().output_dim);
    let c = criterion(cli);
    let Some(cert) = detect_structure(&p.trace, &p.params, n, a.t, kind, a.tol) else {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("no {kind} structure with t={} and sets of at least {n} units at this point", a.t),
        });
    };
    let subsets: Vec<Vec<usize>> = match (&a.subset, kind) {
        (Some(s), _) => vec![s.clone()],
        (None, StructureKind::Weak) => layer_subsets(&(a.t..=h).collect::<Vec<_>>()),
        (None, StructureKind::Strong) => {
            let mut ends = vec![a.t, h];
            ends.dedup();
            layer_subsets(&ends)
        }
    };
    let mut bounds = Vec::new();
    for s in &subsets {
        let (first, second) = match kind {
            StructureKind::Weak => (
                ("theorem2", theorem2_bound(&p.trace, &p.patterns, &p.params, &p.y, &cert, s, c)?),
                ("corollary1", corollary1_bound(&p.trace, &p.patterns, &p.params, &p.y, &cert, s, c)?),
            ),
            StructureKind::Strong => (
                ("corollary2", corollary2_bound(&p.trace, &p.patterns, &p.params, &p.y, &cert, s, c)?),
                ("theorem2", theorem2_bound(&p.trace, &p.patterns, &p.params, &p.y, &cert.as_weak(), s, c)?),
            ),
        };
        for (form, report) in [first, second] {
            let mut v = serde_json::to_value(&report).expect("report serializes");
            v["form"] = json!(form);
            bounds.push(v);
        }
    }
    emit(cli, "bounds.json", &json!({ "certificate": cert, "criterion": c, "bounds": bounds }))
}

fn prop2(cli: &Cli, a: &Prop2Args) -> CmdResult {
    let mut cfg: RankExperimentConfig = read_config(cli)?;
    if let Some(r) = &a.regime {
        cfg.regime = r.parse::<Regime>()?;
    }
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.d_x = a.dx.unwrap_or(cfg.d_x);
    cfg.d = a.d.unwrap_or(cfg.d);
    cfg.trials = a.trials.unwrap_or(cfg.trials);
    if let Some(p) = &a.pattern {
        cfg.pattern = p.parse::<PatternKind>()?;
    }
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    if let Some(c) = cli.cutoff {
        cfg.criterion = c;
    }
    let pool = rayon_pool(cli.jobs)?;
    let exp = pool.install(|| rank_experiment(&cfg))?;
    let dir = out_dir(cli, "prop2");
    write_rank_outputs(&dir, &exp)?;
    let s = &exp.summary;
    eprintln!(
        "full rank {}/{} trials, mean loss ratio {:.6} (predicted {:.6}); results in {}",
        (s.full_rank_fraction * cfg.trials as f64).round(),
        cfg.trials,
        s.loss_ratio_mean,
        s.predicted_loss_ratio,
        dir.display()
    );
    Ok(())
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| usage(format!("cannot start {jobs} worker threads: {e}")))
}

fn lemma_check(cli: &Cli, a: &LemmaArgs) -> CmdResult {
    if a.cases == 0 {
        return Err(usage("--cases must be positive"));
    }
    let pool = rayon_pool(cli.jobs)?;
    let checks = pool.install(|| identities::run_all(a.cases, cli.seed.unwrap_or(0), criterion(cli)))?;
    for c in &checks {
        eprintln!(
            "{} {}: max error {:.3e} (tol {:.0e}) over {}/{} cases",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tol,
            c.checked,
            c.cases
        );
    }
    emit(cli, "identities.json", &serde_json::to_value(&checks).expect("checks serialize"))?;
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure { code: EXIT_NUMERICAL, message: "some identity suites failed".into() })
    }
}
