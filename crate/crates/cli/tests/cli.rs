use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn rdctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdctl"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn eig_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let out = rdctl(dir.path(), &["eig"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = csv_rows(&dir.path().join("eigenvalues.csv"));
    assert_eq!(header[1], "lambda");
    for row in rows.iter().take(30) {
        let n: f64 = row[0].parse().unwrap();
        let lam: f64 = row[1].parse().unwrap();
        let exact = ((2.0 * n - 1.0) * PI / 2.0).powi(2) + 1.0;
        assert!(
            ((lam - exact) / exact).abs() <= 1e-8,
            "mode {n}: {lam} vs {exact}"
        );
    }
    let report = json(&dir.path().join("basis_report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["pass"], true);
}

#[test]
fn theta1_zero_is_rejected_with_range() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[plant]\ntheta1 = 0.0\n");
    let out = rdctl(dir.path(), &["eig", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("theta1") && err.contains("(0, pi/2]"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[synthesis]\npole = [-1.3]\n");
    let out = rdctl(dir.path(), &["synth", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pole"));
}

#[test]
fn synth_reproduces_reference_gains() {
    let dir = TempDir::new().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/presets/repro-h1.cfg");
    let out = rdctl(dir.path(), &["synth", "--config", cfg]);
    assert!(out.status.success());
    let g = json(&dir.path().join("gains.json"));
    let k = g["gains"]["k"][0].as_f64().unwrap();
    let l = g["gains"]["l"][0].as_f64().unwrap();
    assert!((k + 0.8250).abs() <= 5e-4, "K = {k}");
    assert!((l - 1.2958).abs() <= 5e-4, "L = {l}");
    assert_eq!(g["gains"]["n0"], 1);
}

#[test]
fn pole_flag_moves_the_gain() {
    let dir = TempDir::new().unwrap();
    let out = rdctl(dir.path(), &["synth", "--poles=-2.0"]);
    assert!(out.status.success());
    let g = json(&dir.path().join("gains.json"));
    let k = g["gains"]["k"][0].as_f64().unwrap();
    assert!((k + 0.8250).abs() > 0.1);
    assert_eq!(g["hurwitz_margin_ok"], true);
    // Both pole sets sit at −2 and every other mode decays faster.
    assert!((g["closed_loop_abscissa"].as_f64().unwrap() + 2.0).abs() < 1e-8);
}

#[test]
fn wide_margin_adds_a_mode() {
    // −λ₂ + 4 = −(3π/2)² + 3 ≈ −19.21 is not below −19.5.
    let lam2 = (1.5 * PI).powi(2) + 1.0;
    assert!(-lam2 + 4.0 > -19.5);
    let dir = TempDir::new().unwrap();
    let out = rdctl(dir.path(), &["synth", "--delta", "19.5", "--poles=-20,-21"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let g = json(&dir.path().join("gains.json"));
    assert_eq!(g["gains"]["n0"], 2);
    assert_eq!(g["gains"]["k"].as_array().unwrap().len(), 2);
}

#[test]
fn pole_count_mismatch_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = rdctl(dir.path(), &["synth", "--poles=-2,-3"]);
    assert_eq!(out.status.code(), Some(2));
}

fn scale_certificate(src: &Path, dst: &Path, s: f64) {
    let mut v = json(src);
    let params = &mut v["certificate"]["params"];
    for row in params["p"].as_array_mut().unwrap() {
        for x in row.as_array_mut().unwrap() {
            *x = Value::from(x.as_f64().unwrap() * s);
        }
    }
    for key in ["beta", "gamma", "tau"] {
        if let Some(x) = params[key].as_f64() {
            params[key] = Value::from(x * s);
        }
    }
    fs::write(dst, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn certificate_round_trip() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let out = rdctl(d, &["check", "--theorem", "t3", "--n", "3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let cert = d.join("certificate.json");
    let v = json(&cert);
    assert_eq!(v["status"], "feasible");
    assert_eq!(v["certificate"]["theorem"], "T3_H1_sector");

    let c = cert.to_str().unwrap();
    assert!(rdctl(d, &["check", "--certificate", c]).status.success());

    let bad = d.join("negated.json");
    scale_certificate(&cert, &bad, -1.0);
    let out = rdctl(d, &["check", "--certificate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&d.join("reverify.json"))["feasible"], false);

    let scaled = d.join("scaled.json");
    scale_certificate(&cert, &scaled, 40.0);
    assert!(
        rdctl(d, &["check", "--certificate", scaled.to_str().unwrap()])
            .status
            .success()
    );
}

#[test]
fn zero_initial_data_gives_zero_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "z.toml",
        "[simulation]\ninitial = \"zero\"\nt_final = 0.5\n",
    );
    let out = rdctl(dir.path(), &["simulate", "--config", &cfg]);
    assert!(out.status.success());
    let (header, rows) = csv_rows(&dir.path().join("trajectory.csv"));
    assert_eq!(header[0], "t");
    assert_eq!(rows.len(), 51);
    for row in &rows {
        assert!(row[1..].iter().all(|v| v == "0"), "{row:?}");
    }
    let sim = json(&dir.path().join("simulation.json"));
    assert_eq!(sim["diverged"], false);
    assert!(sim["decay_fit"].is_null());
}

#[test]
fn default_simulation_decays() {
    let dir = TempDir::new().unwrap();
    let out = rdctl(dir.path(), &["simulate"]);
    assert!(out.status.success());
    let sim = json(&dir.path().join("simulation.json"));
    assert!(sim["decay_fit"]["rate"].as_f64().unwrap() >= 0.27);
    assert_eq!(sim["certificate_found"], true);
    assert_eq!(sim["lyapunov"]["violations"], 0);
    for f in ["modes.csv", "profiles.json", "plot_simulation.py"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn empty_sweep_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "e.toml", "[sweep]\nvalues = []\n");
    let out = rdctl(dir.path(), &["sweep", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("sweep.csv").exists());
}

#[test]
fn n_sweep_reports_smallest_feasible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "n.toml",
        "[sweep]\naxis = \"n\"\nvalues = [5, 2, 3, 4]\n",
    );
    let out = rdctl(dir.path(), &["sweep", "--config", &cfg, "--theorem", "t1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&dir.path().join("sweep.json"));
    let rows = v["rows"].as_array().unwrap();
    let ns: Vec<u64> = rows.iter().map(|r| r["n"].as_u64().unwrap()).collect();
    assert_eq!(ns, vec![2, 3, 4, 5]);
    let first = rows
        .iter()
        .find(|r| r["feasible"] == true)
        .map(|r| r["n"].clone());
    assert_eq!(v["min_feasible_n"], first.unwrap_or(Value::Null));
    let (header, csv) = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(header[0], "n");
    assert_eq!(csv.len(), 4);
}

#[test]
fn q_sweep_needs_a_sector_theorem() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "q.toml", "[sweep]\nvalues = [-3.0]\nn = 4\n");
    let out = rdctl(dir.path(), &["sweep", "--config", &cfg, "--theorem", "t2"]);
    assert_eq!(out.status.code(), Some(2));
}

const REDUCED: &str = r#"
[sweep]
values = [-3.0, -5.0]
n = 4

[simulation]
t_final = 2.0
fit_window = [0.5, 2.0]

[repro]
c4_n = 4
c4_n_max = 5
diverge_t_final = 1.0
sweep_reference = []
"#;

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reduced_repro_is_deterministic() {
    let work = TempDir::new().unwrap();
    let cfg = write_config(work.path(), "r.toml", REDUCED);
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    let ra = rdctl(&a, &["repro", "--config", &cfg]);
    let rb = rdctl(&b, &["repro", "--config", &cfg]);
    assert_eq!(ra.status.code(), rb.status.code());
    assert_eq!(ra.stdout, rb.stdout);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), tb.len());
    for ((na, ca), (nb, cb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(ca == cb, "{na} differs between runs");
    }
    let summary = json(&a.join("summary.json"));
    let checks = summary["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 10);
    let failed = checks.iter().filter(|c| c["pass"] == false).count();
    assert_eq!(summary["failed"].as_u64().unwrap() as usize, failed);
    assert_eq!(ra.status.success(), failed == 0);
    for f in [
        "gains.json",
        "certificate_t3.json",
        "certificate_c4.json",
        "sweep.csv",
        "simulation/trajectory.csv",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn halving_resolution_quadruples_residuals() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.toml",
        "[plant]\np = [{start = 0.0, end = 1.0, coeffs = [1.0, 0.5]}]\nn_modes = 6\n",
    );
    let residuals = |res: &str| -> Vec<f64> {
        let out = dir.path().join(res);
        rdctl(&out, &["eig", "--config", &cfg, "--resolution", res]);
        let (_, rows) = csv_rows(&out.join("eigenvalues.csv"));
        assert!(
            rows.iter().all(|r| r[2].is_empty()),
            "no closed form for variable p"
        );
        rows.iter().map(|r| r[4].parse().unwrap()).collect()
    };
    let (fine, coarse) = (residuals("401"), residuals("201"));
    for (f, c) in fine.iter().zip(&coarse) {
        let ratio = c / f;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}
