use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

fn nbrw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbrw")).args(args).output().expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

/// results.csv as (header, rows).
fn read_csv(dir: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(dir.join("results.csv")).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column<'a>(header: &[String], rows: &'a [Vec<String>], name: &str) -> Vec<&'a str> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].as_str()).collect()
}

#[test]
fn theory_sub_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "theory", "--out", &out_arg(dir.path()), "--sweep.regime", "sub", "--sweep.alpha", "null", "--sweep.l", "10",
        "--sweep.horizons", "1e6",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(dir.path());
    let m: f64 = column(&h, &rows, "m")[0].parse().unwrap();
    let want = 1e6 * (1.0 - PI * PI / 200.0);
    assert!((m - want).abs() < 1e-6 * want, "{m} vs {want}");
}

#[test]
fn theory_json_has_m_and_b() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "theory", "--out", &out_arg(dir.path()), "--model.profile", "preset:fig1", "--sweep.alpha", "1",
        "--sweep.horizons", "1e6",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("theory.json")).unwrap()).unwrap();
    let r = &doc["reports"][0];
    assert!(r["m"].is_number() && r["b"].is_number());
    assert_eq!(r["regime"], "crit");
}

#[test]
fn sup_d_with_increasing_sigma_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "theory", "--out", &out_arg(dir.path()), "--sweep.regime", "sup-d", "--sweep.alpha", "null", "--sweep.l", "100",
        "--model.profile", "poly:0.125,0,1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_with_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"seed\": 3,\n  \"replicas\": ,\n}\n").unwrap();
    let out = nbrw(&["sweep", "--config", &path.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = nbrw(&["sweep", "--out", &out_arg(dir.path()), "--sweep.l", "4"]);
    assert_eq!(out.status.code(), Some(2), "alpha and l together");
    let out = nbrw(&["sweep", "--out", &out_arg(dir.path()), "--replicas", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = nbrw(&["sweep", "--out", &out_arg(dir.path()), "--no.such.key", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

fn bernoulli_sweep(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "sweep", "--out", dir.to_str().unwrap(), "--model.increment", "bernoulli", "--model.profile", "preset:fig3a",
        "--sweep.alpha", "0.5,1,2,4", "--sweep.horizons", "100", "--replicas", "2", "--seed", "17",
    ];
    args.extend_from_slice(extra);
    nbrw(&args)
}

#[test]
fn sweep_has_one_theory_row_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = bernoulli_sweep(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(dir.path());
    let kinds = column(&h, &rows, "kind");
    assert_eq!(kinds.iter().filter(|k| **k == "theory").count(), 4);
    assert_eq!(kinds.iter().filter(|k| **k == "sim").count(), 8);
    assert!(column(&h, &rows, "schema").iter().all(|s| *s == "nbrw.sweep/v1"));
    assert!(column(&h, &rows, "runtime_ms").iter().all(|s| s.is_empty()));
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(!text.contains('\r'));
}

#[test]
fn sweep_is_deterministic_and_threads_do_not_matter() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(bernoulli_sweep(a.path(), &["--threads", "1"]).status.success());
    assert!(bernoulli_sweep(b.path(), &["--threads", "3"]).status.success());
    // The digest covers the thread count; every other cell must agree.
    let strip = |d: &Path| {
        let (h, rows) = read_csv(d);
        let i = h.iter().position(|c| c == "config_digest").unwrap();
        rows.into_iter().map(|mut r| {
            r.remove(i);
            r
        }).collect::<Vec<_>>()
    };
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn manifest_reruns_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert!(bernoulli_sweep(&first, &[]).status.success());
    let manifest = first.join("manifest.json");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(doc["seed"], 17);
    assert_eq!(doc["config"]["sweep"]["alpha"], serde_json::json!([0.5, 1.0, 2.0, 4.0]));
    // Rerun into the same directory from the manifest alone.
    let before = std::fs::read(first.join("results.csv")).unwrap();
    let out = nbrw(&["sweep", "--config", manifest.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(first.join("results.csv")).unwrap(), before);
}

#[test]
fn critical_gaussian_sweep_matches_the_psi0_constant() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "sweep", "--out", &out_arg(dir.path()), "--sweep.alpha", "2", "--sweep.horizons", "2000", "--replicas", "8",
        "--seed", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(dir.path());
    let kinds = column(&h, &rows, "kind");
    let pred: f64 = column(&h, &rows, "prediction_recentered")[0].parse().unwrap();
    assert!((pred + PI * PI / 8.0).abs() < 1e-8);
    let xs: Vec<f64> = column(&h, &rows, "max_recentered")
        .iter()
        .zip(&kinds)
        .filter(|(_, k)| **k == "sim")
        .map(|(x, _)| x.parse().unwrap())
        .collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - pred).abs() <= 0.5 * pred.abs() + 3.0 * se, "mean {mean} se {se} vs {pred}");
}

#[test]
fn time_budget_gives_partial_output_and_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "sweep", "--out", &out_arg(dir.path()), "--sweep.alpha", "2", "--sweep.horizons", "8000", "--replicas", "20",
        "--max-seconds", "0.3",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let (h, rows) = read_csv(dir.path());
    let status = column(&h, &rows, "status");
    assert_eq!(rows.len(), 21);
    assert!(status.iter().any(|s| s.starts_with("aborted") || s.starts_with("skipped")));
}

#[test]
fn crem_kappa_sweep_query_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&["crem", "--out", &out_arg(dir.path()), "--crem.depths", "3000", "--crem.kappa", "0.2,0.3333333333333333,0.45"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(dir.path());
    assert_eq!(rows.len(), 3);
    let ns: Vec<f64> = column(&h, &rows, "N").iter().map(|x| x.parse().unwrap()).collect();
    let qs: Vec<f64> = column(&h, &rows, "queries").iter().map(|x| x.parse().unwrap()).collect();
    for (n, q) in ns.iter().zip(&qs) {
        let ratio = q / (2.0 * 3000.0 * n);
        assert!((0.98..=1.0).contains(&ratio), "queries {q} for N = {n}");
    }
    assert_eq!(column(&h, &rows, "regime"), ["sub", "crit", "sup"]);
    assert!(column(&h, &rows, "method").iter().all(|m| *m == "exact" || *m == "binned"));
}

#[test]
fn crem_small_depth_has_zero_regret_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "crem", "--out", &out_arg(dir.path()), "--crem.depths", "10", "--crem.kappa", "null", "--crem.widths", "1024",
        "--crem.identity", "true", "--crem.a_prime", "poly:0,2", "--replicas", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(dir.path());
    assert!(column(&h, &rows, "regret").iter().all(|r| r.parse::<f64>().unwrap() == 0.0));
    assert!(column(&h, &rows, "identity").iter().all(|r| *r == "pass"));
}

#[test]
fn psi_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&["psi", "--out", &out_arg(dir.path()), "--psi.q", "0"]);
    assert!(out.status.success());
    let (h, rows) = read_csv(dir.path());
    let v: f64 = column(&h, &rows, "psi")[0].parse().unwrap();
    assert!((v + PI * PI / 2.0).abs() < 1e-8);
}

#[test]
fn simulate_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbrw(&[
        "simulate", "--out", &out_arg(dir.path()), "--sweep.alpha", "1", "--sweep.horizons", "64",
        "--sim.quantile_ranks", "1,10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(dir.path());
    assert_eq!(rows.len(), 11);
    assert!(h.contains(&"q_10".to_string()));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(doc["details"]["termination"], "completed");
}
