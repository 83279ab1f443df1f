//! End-to-end checks of the built binary: subcommand wiring, exit codes,
//! output files, and schema stability as seen by a shell user.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biascope"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_then_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.toml",
        "mechanism = \"confounding\"\nd = 4\nn_rct = 6000\nn_os = 6000\n",
    );
    let sim = dir.path().join("sim");
    let out = run(&[
        "simulate",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        sim.to_str().unwrap(),
        "--with-u",
    ]);
    assert_exit(&out, 0, "simulate");
    for name in ["rct.csv", "os.csv", "rct_u.csv", "os_u.csv"] {
        assert!(sim.join(name).is_file(), "simulate should write {name}");
    }

    let rct = sim.join("rct.csv");
    let os = sim.join("os.csv");
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "diagnose",
        "--rct",
        rct.to_str().unwrap(),
        "--os",
        os.to_str().unwrap(),
        "--model",
        "freq",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "diagnose");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.get("verdict").is_some(), "report must carry a verdict");
    assert!(report.get("signs").is_some(), "report must carry the sign triple");

    // without --out the same report goes to stdout
    let out = run(&[
        "diagnose",
        "--rct",
        rct.to_str().unwrap(),
        "--os",
        os.to_str().unwrap(),
        "--model",
        "freq",
    ]);
    assert_exit(&out, 0, "diagnose to stdout");
    let streamed: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout should be the report JSON");
    assert_eq!(streamed, report);
}

#[test]
fn oracle_emits_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("oracle.csv");
    let out = run(&[
        "oracle",
        "--mechanism",
        "transportability",
        "--p",
        "0.3",
        "--mc",
        "20000",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "oracle");
    let text = fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mechanism,p,rho_S,se_S,rho_A,se_A,rho_Y,se_Y"));
    let row = lines.next().expect("one data row");
    assert!(row.starts_with("transportability,0.3,"), "unexpected row: {row}");
    assert_eq!(row.split(',').count(), 8);

    // collider signals need the selection table; refusing it is a config error
    let out = run(&["oracle", "--mechanism", "selection-type-2", "--p", "0.2", "--mc", "20000"]);
    assert_exit(&out, 2, "collider oracle without --table");
    let out = run(&[
        "oracle",
        "--mechanism",
        "selection-type-2",
        "--p",
        "0.2",
        "--mc",
        "20000",
        "--table",
        "0.1,0.1,0.1,0.9",
    ]);
    assert_exit(&out, 0, "collider oracle with --table");
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("mechanism,p,"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // 3: data error (missing cohort files)
    let out = run(&["diagnose", "--rct", "missing_rct.csv", "--os", "missing_os.csv"]);
    assert_exit(&out, 3, "missing data files");

    // 2: config error (p_range outside (0.1, 0.5])
    let bad = write_config(dir.path(), "bad.toml", "p_range = [0.2, 0.7]\n");
    let out = run(&["batch", "--config", &bad, "--out", dir.path().to_str().unwrap()]);
    assert_exit(&out, 2, "invalid p_range");

    // 2: config error (mode key disagrees with the subcommand)
    let grid_cfg = write_config(dir.path(), "grid_mode.toml", "mode = \"grid\"\n");
    let out = run(&["batch", "--config", &grid_cfg, "--out", dir.path().to_str().unwrap()]);
    assert_exit(&out, 2, "mode mismatch");

    // 2: clap usage errors share the config exit code
    let out = run(&["no-such-subcommand"]);
    assert_exit(&out, 2, "unknown subcommand");
}

#[test]
fn batch_writes_runs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "batch.toml",
        "mechanism = \"no-bias\"\nd = 2\nn_rct = 1500\nn_os = 1500\nn_val = 400\n\
         n_seeds = 3\nbase_seed = 1\n",
    );
    let out_dir = dir.path().join("batch_out");
    let out = run(&["batch", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_exit(&out, 0, "batch");

    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    let mut lines = runs.lines();
    assert_eq!(lines.next(), Some(biascope::harness::RunRecord::csv_header()));
    assert_eq!(lines.count(), 3, "one row per seed");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_completed"], 3);
    assert_eq!(summary["mechanism"], "no-bias");
}

#[test]
fn grid_csv_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "grid.toml",
        "mechanism = \"confounding\"\nn_os = 1200\nn_val = 300\nn_seeds = 2\n\
         [grid]\nmechanisms = [\"confounding\"]\nds = [2]\nn_rcts = [1200]\n",
    );
    let out_dir = dir.path().join("grid_out");
    let out = run(&["grid", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_exit(&out, 0, "grid");

    let grid = fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(
        lines.next(),
        Some(
            "mechanism,d,n_rct,n_seeds,n_completed,n_failed,match_fraction,\
             all_nonsignificant_fraction,sig_s,sig_a,sig_y,median_r_s,median_r_a,median_r_y,\
             median_p_s,median_p_a,median_p_y,power"
        )
    );
    let row = lines.next().expect("one grid cell");
    assert!(row.starts_with("confounding,2,1200,2,"), "unexpected row: {row}");
    assert_eq!(lines.next(), None);
}

#[test]
fn whi_replica_writes_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "whi.toml",
        "mechanism = \"selection-type-2+transportability\"\nd = 2\n\
         n_rct = 2500\nn_os = 2500\nn_val = 500\nn_seeds = 2\n",
    );
    let out_dir = dir.path().join("whi_out");
    let out = run(&["whi-replica", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_exit(&out, 0, "whi-replica");
    for name in [
        "whi_combined_runs.csv",
        "whi_combined_summary.json",
        "whi_corrected_runs.csv",
        "whi_corrected_summary.json",
    ] {
        assert!(out_dir.join(name).is_file(), "replica should write {name}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("median r("), "stdout should report the median shifts");
}
