//! End-to-end runs of the `elliptrim` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elliptrim")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&out.stderr)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Deterministic standard-normal rows from a small LCG plus Box-Muller.
fn normal_rows(n: usize, p: usize, mut state: u64) -> Vec<Vec<f64>> {
    let mut unif = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    (0..n)
        .map(|_| {
            (0..p)
                .map(|_| {
                    let (u, v) = (unif(), unif());
                    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
                })
                .collect()
        })
        .collect()
}

fn csv_text(rows: &[Vec<f64>]) -> String {
    let p = rows[0].len();
    let mut s = (0..p).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn clean_fit_reports_a_small_contamination_fraction() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "clean.csv", &csv_text(&normal_rows(800, 2, 7)));
    let out = run(&["fit", "--input", path_str(&input), "--coverage", "0.975", "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&out);
    let s = &v["variants"]["s"];
    assert!(s["pi_hat"].as_f64().unwrap().abs() < 0.05, "{s}");
    let mu = s["theta_hat"]["mu"].as_array().unwrap();
    assert!(mu.iter().all(|m| m.as_f64().unwrap().abs() < 0.2));
}

#[test]
fn planted_cluster_is_flagged() {
    let dir = TempDir::new().unwrap();
    let mut rows = normal_rows(500, 2, 8);
    rows.extend((0..50).map(|_| vec![50.0, 50.0]));
    let input = write(&dir, "dirty.csv", &csv_text(&rows));
    let out = run(&["fit", "--input", path_str(&input), "--coverage", "0.975", "--seed", "2", "--variant", "s", "--variant", "c"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&out);
    let flagged: Vec<u64> = v["variants"]["s"]["flagged_outliers"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert!((500..550).all(|i| flagged.contains(&i)));
    for name in ["s", "c"] {
        let mu = v["variants"][name]["theta_hat"]["mu"].as_array().unwrap();
        assert!(mu.iter().all(|m| m.as_f64().unwrap().abs() < 0.3), "{name}: {mu:?}");
    }
}

#[test]
fn csv_output_has_one_row_per_variant() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "clean.csv", &csv_text(&normal_rows(200, 2, 9)));
    let out = run(&["fit", "--input", path_str(&input), "--seed", "3", "--format", "csv", "--variant", "t", "--variant", "c"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("variant,status,branch"));
    assert!(lines[0].ends_with("sigma_x0_x0,sigma_x1_x0,sigma_x1_x1"));
    assert!(lines[1].starts_with("t,ok") && lines[2].starts_with("c,ok"));
}

#[test]
fn input_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let empty = write(&dir, "empty.csv", "");
    let out = run(&["fit", "--input", path_str(&empty)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no observations"));

    let header = write(&dir, "header.csv", "a,b\n");
    let out = run(&["fit", "--input", path_str(&header)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no observations"));

    let bad = write(&dir, "bad.csv", "a,b\n1,2\n3,abc\n");
    let out = run(&["fit", "--input", path_str(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("row 2, column 2"), "{}", stderr(&out));

    let ragged = write(&dir, "ragged.csv", "a,b\n1,2\n3\n");
    let out = run(&["fit", "--input", path_str(&ragged)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("row 2"), "{}", stderr(&out));

    let short = write(&dir, "short.csv", "a,b,c\n1,2,3\n4,5,6\n7,8,9\n");
    let out = run(&["fit", "--input", path_str(&short)]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["fit", "--input", path_str(&dir.path().join("missing.csv"))]);
    assert_eq!(out.status.code(), Some(1));

    let good = write(&dir, "good.csv", &csv_text(&normal_rows(50, 1, 1)));
    for args in [
        vec!["fit", "--input", path_str(&good), "--family", "laplace"],
        vec!["fit", "--input", path_str(&good), "--coverage", "0.3"],
        vec!["fit", "--input", path_str(&good), "--variant", "z"],
        vec!["fit", "--input", path_str(&good), "--no-such-flag"],
    ] {
        assert_eq!(run(&args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn simulations_require_a_seed() {
    let out = run(&["simulate", "--n-grid", "50", "--replicates", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn nonexistent_estimate_exits_with_two_and_keeps_the_others() {
    // inside points pile up at both ends of the half-sample interval
    let mut xs: Vec<f64> = (0..6).map(|i| -1.0 + 0.004 * i as f64).collect();
    xs.extend((0..5).map(|i| 1.0 - 0.004 * i as f64));
    xs.extend([-12.0, -11.0, -10.0, -9.0, 9.0, 10.0, 11.0, 12.0, 13.0]);
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "edges.csv", &format!("x\n{}\n", xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n")));
    let out = run(&["fit", "--input", path_str(&input), "--variant", "t", "--variant", "c"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let v = json(&out);
    assert!(v["variants"]["t"]["error"].as_str().unwrap().contains("does not exist"));
    assert!(v["variants"]["c"]["theta_hat"].is_object());
}

fn efficiency_cell(text: &str, variant: &str, alpha: &str, component: &str) -> f64 {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[2] == variant && f[3] == alpha && f[4] == component)
        .unwrap_or_else(|| panic!("no cell {variant} {alpha} {component}"))[5]
        .parse()
        .unwrap()
}

#[test]
fn efficiency_table_reproduces_known_gaussian_cells() {
    let out = run(&[
        "efficiency", "--family", "gaussian", "--p", "2", "--variant", "c", "--alpha", "none", "--alpha", "0.025",
        "--component", "mu", "--component", "sigma_diag", "--seed", "11", "--format", "csv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    for (alpha, comp, want) in [("none", "mu", 0.1531), ("0.025", "mu", 0.8821), ("none", "sigma_diag", 0.2666)] {
        let got = efficiency_cell(&text, "c", alpha, comp);
        assert!((got - want).abs() < 0.02, "{alpha} {comp}: {got} vs {want}");
    }
}

#[test]
fn config_file_and_flags_combine_deterministically() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "sim.cfg",
        "# rate study\nscenario = gem_ring\npi0 = 0.1\nradius = 10\ncoverage = 0.975\nn_grid = 200, 800\nreplicates = 12\nvariant = s\nmode = rate\nseed = 5\nformat = json\n",
    );
    let a = run(&["simulate", "--config", path_str(&cfg)]);
    let b = run(&["simulate", "--config", path_str(&cfg)]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    let errs: Vec<f64> = v["cells"].as_array().unwrap().iter().map(|c| c["mean_abs_pi_error"].as_f64().unwrap()).collect();
    assert_eq!(errs.len(), 2);
    assert!(errs[1] < errs[0] && errs[1] < 0.03, "{errs:?}");

    let c = run(&["simulate", "--config", path_str(&cfg), "--seed", "6"]);
    assert!(c.status.success());
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(json(&c)["plan"]["seed"].as_u64(), Some(6));
}

#[test]
fn replacement_outliers_below_breakdown_do_not_break_the_fits() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("bd.csv");
    let out = run(&[
        "breakdown", "--p", "2", "--n-grid", "20", "--count", "8", "--replicates", "30", "--seed", "4", "--format", "csv",
        "--out", path_str(&out_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&out_path).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let head = rdr.headers().unwrap().clone();
    let col = head.iter().position(|h| h == "break_rate").expect("break_rate column");
    let var = head.iter().position(|h| h == "variant").unwrap();
    let mut seen = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let rate: f64 = rec[col].parse().unwrap();
        assert!(rate <= 0.05, "{}: {rate}", &rec[var]);
        seen.push(rec[var].to_string());
    }
    assert_eq!(seen, ["s", "c", "r"]);
}
