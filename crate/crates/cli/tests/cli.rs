use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use minima_core::linalg::io::write_csv;
use minima_core::linalg::{CutoffCriterion, DenseMatrix};
use minima_core::minima::compute_j;
use minima_core::network::io::save_params;
use minima_core::random_lab::sample_gaussian;
use minima_core::structure::layer_subsets;
use minima_core::network::{activation_patterns, forward, init_params, ActivationKind, NetworkArch, NetworkParams};
use minima_core::trainer::{descend_to_stationarity, DescentOptions};
use nalgebra::DMatrix;
use serde_json::Value;

fn minima(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minima")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_out(o: &Output) -> Value {
    assert_eq!(code(o), 0, "{}", stderr(o));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    sample_gaussian(rows, cols, seed).unwrap().into_inner()
}

/// Writes params, x and y into `dir` and returns the three paths.
fn write_point(dir: &Path, params: &NetworkParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> [String; 3] {
    save_params(dir.join("params"), params, None, None).unwrap();
    write_csv(dir.join("x.csv"), x).unwrap();
    write_csv(dir.join("y.csv"), y).unwrap();
    [dir.join("params"), dir.join("x.csv"), dir.join("y.csv")].map(|q| p(&q).to_string())
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&minima(&[])), 1);
    assert_eq!(code(&minima(&["frobnicate"])), 1);
    assert_eq!(code(&minima(&["--cutoff", "median", "lemma-check"])), 1);
    assert_eq!(code(&minima(&["prop2", "--regime", "sideways", "--trials", "1"])), 1);
    assert_eq!(code(&minima(&["bound", "--params", "a", "--x", "b", "--y", "c"])), 1);
    let help = minima(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["gen-data", "analyze", "sweep", "bound", "prop2", "lemma-check"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = minima(&["--seed", "7", "--out", p(out), "gen-data", "--samples", "50"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["x.csv", "y.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let y = fs::read_to_string(a.join("y.csv")).unwrap();
    assert_eq!(y.lines().count(), 50);
    assert!(y.lines().all(|l| !l.contains(',')));
    let x = fs::read_to_string(a.join("x.csv")).unwrap();
    assert!(x.lines().all(|l| l.split(',').count() == 6));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["desk_default"]["samples"], 512);
    assert_eq!(manifest["full_scale"]["depth"], 7);

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"depth": 2, "width": 5, "input_dim": 3, "samples": 9}"#).unwrap();
    let c = dir.path().join("c");
    let o = minima(&["--config", p(&cfg), "--out", p(&c), "gen-data", "--dy", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let y = fs::read_to_string(c.join("y.csv")).unwrap();
    assert_eq!(y.lines().count(), 9);
    assert!(y.lines().all(|l| l.split(',').count() == 2));
    assert_eq!(code(&minima(&["--out", p(&c), "gen-data", "--preset", "huge"])), 1);
}

#[test]
fn analyze_matches_library_and_zero_targets_give_zero() {
    let dir = tempfile::tempdir().unwrap();
    let arch = NetworkArch::uniform(3, vec![4, 3], 1, ActivationKind::Relu).unwrap();
    let params = init_params(&arch, 2, 1.0).unwrap();
    let x = gaussian(9, 3, 1);
    let y = gaussian(9, 1, 2);
    let [pd, xf, yf] = write_point(dir.path(), &params, &x, &y);
    let out = dir.path().join("out");
    let report = json_out(&minima(&["--cutoff", "golub", "--out", p(&out), "analyze", "--params", &pd, "--x", &xf, "--y", &yf]));

    let xm = minima_core::linalg::io::read_csv(&xf).unwrap();
    let ym = minima_core::linalg::io::read_csv(&yf).unwrap().into_inner();
    let trace = forward(&params, &xm).unwrap();
    let pats = activation_patterns(&trace, 1e-12).unwrap();
    let lib = compute_j(&trace, &pats, &params, &ym, CutoffCriterion::GolubVanLoan).unwrap();
    assert_eq!(report, serde_json::to_value(&lib).unwrap());
    assert_eq!(serde_json::from_str::<Value>(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap(), report);

    write_csv(dir.path().join("y.csv"), &DMatrix::zeros(9, 1)).unwrap();
    let zero = json_out(&minima(&["analyze", "--params", &pd, "--x", &xf, "--y", &yf]));
    assert_eq!(zero["J_direct"], 0.0);
    assert_eq!(zero["J_decomposed"], 0.0);
}

#[test]
fn analyze_deep_linear_minimum_gives_least_squares_residual() {
    let dir = tempfile::tempdir().unwrap();
    let arch = NetworkArch::uniform(3, vec![3, 3], 1, ActivationKind::Linear).unwrap();
    let x = gaussian(20, 3, 5);
    let y = gaussian(20, 1, 6);
    let xd = DenseMatrix::new(x.clone()).unwrap();
    let opts = DescentOptions { tol: 1e-10, max_iters: 100_000, ..Default::default() };
    let (params, rep) = descend_to_stationarity(&init_params(&arch, 3, 1.0).unwrap(), &xd, &y, opts).unwrap();
    assert!(rep.grad_norm <= 1e-8, "{rep:?}");
    let [pd, xf, yf] = write_point(dir.path(), &params, &x, &y);
    let report = json_out(&minima(&["analyze", "--params", &pd, "--x", &xf, "--y", &yf]));
    let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
    let oracle = 0.5 * (&y - &x * beta).norm_squared();
    let l = report["L"].as_f64().unwrap();
    assert!((l - oracle).abs() <= 1e-6, "{l} vs {oracle}");
    assert!((report["J_direct"].as_f64().unwrap() - oracle).abs() <= 1e-6);
}

#[test]
fn bad_data_exits_two_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let arch = NetworkArch::uniform(2, vec![2], 1, ActivationKind::Relu).unwrap();
    let [pd, xf, yf] = write_point(dir.path(), &init_params(&arch, 0, 1.0).unwrap(), &gaussian(4, 2, 0), &gaussian(4, 1, 1));
    fs::write(&xf, "1.0,2.0\n3.0,oops\n").unwrap();
    let o = minima(&["analyze", "--params", &pd, "--x", &xf, "--y", &yf]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("x.csv") && msg.contains("line 2"), "{msg}");

    write_csv(&xf, &gaussian(4, 3, 0)).unwrap();
    assert_eq!(code(&minima(&["analyze", "--params", &pd, "--x", &xf, "--y", &yf])), 2);
    let missing = dir.path().join("nope");
    assert_eq!(code(&minima(&["analyze", "--params", p(&missing), "--x", &xf, "--y", &yf])), 2);
}

#[test]
fn overflowing_forward_pass_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let arch = NetworkArch::uniform(1, vec![1], 1, ActivationKind::Linear).unwrap();
    let big = DenseMatrix::from_row_slice(1, 1, &[1e300]).unwrap();
    let params = NetworkParams::new(arch, vec![big.clone(), big]).unwrap();
    let [pd, xf, yf] = write_point(dir.path(), &params, &DMatrix::from_element(2, 1, 1e300), &DMatrix::zeros(2, 1));
    let o = minima(&["analyze", "--params", &pd, "--x", &xf, "--y", &yf]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn sweep_writes_cells_and_heat_maps_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    fs::write(&cfg, r#"{"data": {"kind": "synthetic", "samples": 40}, "train": {"epochs": 2, "batch_size": 10}}"#).unwrap();
    let run = |out: &Path, jobs: &str| {
        let o = minima(&[
            "--config", p(&cfg), "--jobs", jobs, "--seed", "3", "--out", p(out), "sweep", "--depths", "1", "--widths", "2",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a, "1");
    run(&b, "3");
    let csv = fs::read_to_string(a.join("cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("1,2,init,"));
    assert!(csv.lines().nth(2).unwrap().starts_with("1,2,trained,"));
    for f in ["cells.csv", "heatmap_init.svg", "heatmap_trained.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let read = |d: &Path| -> Value { serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap() };
    let (manifest, mut other) = (read(&a), read(&b));
    other["config"]["out"] = manifest["config"]["out"].clone();
    assert_eq!(manifest, other);
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["cells"], 2);

    let files = dir.path().join("files");
    let o = minima(&["--out", p(&files), "gen-data", "--samples", "30", "--dx", "2"]);
    assert_eq!(code(&o), 0);
    let c = dir.path().join("c");
    let o = minima(&[
        "--out", p(&c), "sweep", "--depths", "1,2", "--widths", "3", "--analyze-at", "init",
        "--x", p(&files.join("x.csv")), "--y", p(&files.join("y.csv")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(c.join("cells.csv")).unwrap().lines().count(), 3);
    assert!(!c.join("heatmap_trained.svg").exists());
    assert_eq!(code(&minima(&["--out", p(&c), "sweep", "--depths", ""])), 1);
}

#[test]
fn bound_reports_certificate_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let arch = NetworkArch::uniform(2, vec![3, 2], 1, ActivationKind::Linear).unwrap();
    let params = init_params(&arch, 4, 1.0).unwrap();
    let [pd, xf, yf] = write_point(dir.path(), &params, &gaussian(10, 2, 1), &gaussian(10, 1, 2));
    let pt = ["--params", pd.as_str(), "--x", xf.as_str(), "--y", yf.as_str()];
    let run = |extra: &[&str]| minima(&[&["bound"], &pt[..], extra].concat());

    let all = json_out(&run(&["--t", "0"]));
    assert_eq!(all["certificate"]["sets"], serde_json::json!([[0, 1, 2], [0, 1], [0]]));
    assert_eq!(all["bounds"].as_array().unwrap().len(), 2 * layer_subsets(&[0, 1, 2]).len());
    let one = json_out(&run(&["--t", "0", "--subset", "0,2"]));
    let b = &one["bounds"][0];
    assert_eq!(b["form"], "theorem2");
    assert_eq!(b["S"], serde_json::json!([0, 2]));
    assert!(b["bound"].as_f64().unwrap().is_finite());
    assert_eq!(one["bounds"][1]["form"], "corollary1");

    let strong = json_out(&run(&["--structure", "strong", "--t", "0", "--subset", "0,2"]));
    assert_eq!(strong["bounds"][0]["form"], "corollary2");
    assert_eq!(code(&run(&["--structure", "strong", "--t", "0", "--subset", "1"])), 1);
    assert_eq!(code(&run(&["--t", "5"])), 1);
    assert_eq!(code(&run(&["--structure", "medium", "--t", "0"])), 1);

    let relu = NetworkArch::uniform(2, vec![3, 2], 1, ActivationKind::Relu).unwrap();
    let [pd, xf, yf] = write_point(dir.path(), &init_params(&relu, 4, 1.0).unwrap(), &gaussian(10, 2, 1), &gaussian(10, 1, 2));
    let o = minima(&["bound", "--params", &pd, "--x", &xf, "--y", &yf, "--t", "0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("no weak structure"));
}

#[test]
fn prop2_single_trial_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        let o = minima(&[
            "--seed", "9", "--out", p(out), "prop2", "--regime", "over", "--m", "8", "--dx", "4", "--d", "4", "--trials", "1",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let csv = fs::read_to_string(a.join("trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().contains(",overparam,8,4,4,"));
    for f in ["trials.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["target_rank"], 8);
    assert!(summary["size_conditions"]["over_required_dx"].as_f64().unwrap() > 0.0);

    let cfg = dir.path().join("p.json");
    fs::write(&cfg, r#"{"regime": "overparam", "m": 6, "d_x": 3, "d": 4, "trials": 3}"#).unwrap();
    let c = dir.path().join("c");
    let o = minima(&["--config", p(&cfg), "--out", p(&c), "prop2", "--pattern", "abs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(c.join("trials.csv")).unwrap().lines().count(), 4);
}

#[test]
fn lemma_check_runs_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = minima(&["--out", p(dir.path()), "lemma-check", "--cases", "12"]);
    let checks = json_out(&o);
    let names: Vec<&str> = checks.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["output_factorization", "orthogonal_additivity", "unit_decomposition", "shallow_minimum_loss"]);
    assert!(checks.as_array().unwrap().iter().all(|c| c["passed"] == true));
    assert_eq!(stderr(&o).matches("PASS").count(), 4);
    assert!(dir.path().join("identities.json").exists());
    assert_eq!(code(&minima(&["lemma-check", "--cases", "0"])), 1);
    assert_eq!(code(&minima(&["--config", "x.json", "lemma-check"])), 1);
}
