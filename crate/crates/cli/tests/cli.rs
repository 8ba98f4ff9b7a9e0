use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use traffic_pde_cli::artifacts::{RunManifest, DISCOVERY_FILES};

const TINY: &str = "width_f_o = [2, 6, 1]
width_f_q = [3, 6, 1]
width_f_v = [3, 6, 1]
burn_in_epochs = 2
main_epochs = 4
refine_epochs = 2
thresh_freq = 2
log_every = 0
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_traffic-pde"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Synthetic data plus a tiny config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let zero = TINY
        .replace("burn_in_epochs = 2", "burn_in_epochs = 0")
        .replace("main_epochs = 4", "main_epochs = 0")
        .replace("refine_epochs = 2", "refine_epochs = 0");
    fs::write(dir.path().join("zero.toml"), zero).unwrap();
    ok(&run(dir.path(), &["synth", "--out", "data.csv"]));
    dir
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn discover_writes_the_seven_artifacts() {
    let ws = workspace();
    ok(&run(
        ws.path(),
        &[
            "--config",
            "tiny.toml",
            "discover",
            "--data",
            "data.csv",
            "--out",
            "run",
        ],
    ));
    let mut want: Vec<String> = DISCOVERY_FILES.iter().map(|s| s.to_string()).collect();
    want.sort();
    assert_eq!(files(&ws.path().join("run")), want);
    let m = RunManifest::load(&ws.path().join("run")).unwrap();
    let sha = traffic_pde_cli::artifacts::sha256_file(&ws.path().join("data.csv")).unwrap();
    assert_eq!(m.data_sha256, sha);
    assert_eq!(m.config.main_epochs, 4);
    // no staging directory is left behind
    assert_eq!(files(ws.path()), ["data.csv", "run", "tiny.toml", "zero.toml"]);
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let ws = workspace();
    let args = |out: &'static str| {
        [
            "--config",
            "tiny.toml",
            "--seed",
            "5",
            "discover",
            "--data",
            "data.csv",
            "--out",
            out,
        ]
    };
    ok(&run(ws.path(), &args("a")));
    ok(&run(ws.path(), &args("b")));
    for f in [
        "coefficients.json",
        "trace.csv",
        "checkpoint.json",
        "reconstruction.csv",
    ] {
        let a = fs::read(ws.path().join("a").join(f)).unwrap();
        let b = fs::read(ws.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn missing_data_is_an_input_error_without_artifacts() {
    let ws = workspace();
    let out = run(ws.path(), &["discover", "--data", "absent.csv", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path().join("run").exists());
    assert_eq!(files(ws.path()), ["data.csv", "tiny.toml", "zero.toml"]);
}

#[test]
fn existing_output_needs_force() {
    let ws = workspace();
    let args = [
        "--config",
        "zero.toml",
        "discover",
        "--data",
        "data.csv",
        "--out",
        "run",
    ];
    ok(&run(ws.path(), &args));
    assert_eq!(run(ws.path(), &args).status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&run(ws.path(), &forced));
}

#[test]
fn bad_arguments_exit_with_input_code() {
    let ws = workspace();
    assert_eq!(run(ws.path(), &["discover"]).status.code(), Some(2));
    assert_eq!(run(ws.path(), &["frobnicate"]).status.code(), Some(2));
    fs::write(ws.path().join("bad.toml"), "no_such_key = 1\n").unwrap();
    let out = run(ws.path(), &["--config", "bad.toml", "discover", "--data", "data.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epoch_report_shows_untrained_equation() {
    let ws = workspace();
    ok(&run(
        ws.path(),
        &[
            "--config",
            "zero.toml",
            "discover",
            "--data",
            "data.csv",
            "--out",
            "run",
        ],
    ));
    let out = run(ws.path(), &["report", "--dir", "run", "--out", "rep"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("∂t o = 0 (all terms active, untrained)"), "{text}");
    assert!(ws.path().join("rep/report.svg").exists());
}

#[test]
fn report_is_reproducible_and_lists_table_horizons() {
    let ws = workspace();
    let p = ws.path();
    ok(&run(
        p,
        &[
            "--config",
            "tiny.toml",
            "discover",
            "--data",
            "data.csv",
            "--out",
            "run",
        ],
    ));
    ok(&run(
        p,
        &["predict", "--model", "run", "--data", "data.csv", "--out", "pred"],
    ));
    ok(&run(p, &["baseline", "ctm", "--data", "data.csv", "--out", "ctm"]));
    let args = [
        "report",
        "--dir",
        "run",
        "--metrics",
        "pred/metrics.json",
        "--metrics",
        "ctm/metrics.json",
    ];
    let mut one = args.to_vec();
    one.extend(["--out", "r1"]);
    let mut two = args.to_vec();
    two.extend(["--out", "r2"]);
    ok(&run(p, &one));
    ok(&run(p, &two));
    for f in ["report.txt", "report.svg"] {
        assert_eq!(
            fs::read(p.join("r1").join(f)).unwrap(),
            fs::read(p.join("r2").join(f)).unwrap()
        );
    }
    let text = fs::read_to_string(p.join("r1/report.txt")).unwrap();
    for h in ["3-min", "6-min", "9-min", "12-min", "15-min"] {
        assert!(text.contains(h), "{h} missing");
    }
    assert!(text.contains("discovered PDE") && text.contains("CTM"));
}

#[test]
fn report_names_missing_artifact() {
    let ws = workspace();
    let p = ws.path();
    ok(&run(
        p,
        &[
            "--config",
            "zero.toml",
            "discover",
            "--data",
            "data.csv",
            "--out",
            "run",
        ],
    ));
    fs::remove_file(p.join("run/trace.csv")).unwrap();
    let out = run(p, &["report", "--dir", "run", "--out", "rep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trace.csv"));
}

#[test]
fn ingest_aggregates_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = String::from("station_id,milepost_miles,timestamp_iso8601,occupancy_pct,flow_veh,speed_mph\n");
    for s in 0..3 {
        for k in 0..12 {
            let minute = 360.0 + 0.5 * k as f64;
            let ts = format!(
                "2024-03-04T{:02}:{:02}:{:02}",
                (minute / 60.0) as u32,
                (minute % 60.0) as u32,
                if k % 2 == 1 { 30 } else { 0 }
            );
            raw.push_str(&format!("S{s},{},{ts},{},{},60\n", 2 * s, 10 + s, 4));
        }
    }
    fs::write(dir.path().join("raw.csv"), raw).unwrap();
    let out = run(
        dir.path(),
        &[
            "ingest",
            "--raw",
            "raw.csv",
            "--grid",
            "0,4,2,360,363,3",
            "--out",
            "grid.csv",
        ],
    );
    ok(&out);
    let text = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "{text}");
    // six half-minute samples of 4 vehicles make one 3-minute count of 24
    assert!(rows[0].ends_with(",10,24,60"), "{}", rows[0]);
}

#[test]
fn check_derivatives_passes_on_default_networks() {
    let out = bin().args(["check-derivatives", "--count", "2"]).output().unwrap();
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 11);
}

#[test]
fn first_order_baseline_uses_reduced_library() {
    let ws = workspace();
    let p = ws.path();
    ok(&run(
        p,
        &[
            "--config",
            "tiny.toml",
            "baseline",
            "first-order",
            "--data",
            "data.csv",
            "--out",
            "fo",
        ],
    ));
    let c: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("fo/coefficients.json")).unwrap()).unwrap();
    assert_eq!(c["terms"].as_array().unwrap().len(), 28);
    assert!(p.join("fo/metrics.json").exists());
}
