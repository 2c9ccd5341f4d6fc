use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use sha2::{Digest, Sha256};

use tweezer_cli::{run_scenario, RunOptions, Scenario, Stage, StageStatus, REPORT_FILE};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn load(name: &str) -> Scenario {
    Scenario::from_path(&scenario_path(name)).unwrap()
}

fn run_into(sc: &Scenario, dir: &Path, stages: Vec<Stage>) -> tweezer_cli::RunOutcome {
    let opts = RunOptions {
        output_dir: Some(dir.to_path_buf()),
        stages,
        ..RunOptions::default()
    };
    run_scenario(sc, &opts).unwrap()
}

fn report_json(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join(REPORT_FILE)).unwrap()).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tweezer"))
}

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap();
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    out
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn bullseye_reproduces_ring_and_centre_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(&load("bullseye.json"), dir.path(), Vec::new());
    assert_eq!(out.exit_code(), 0);
    let r = report_json(dir.path());
    let n = &r["metrics"]["image"]["atom_numbers"];
    let centre = n["centre"]["mean"].as_f64().unwrap();
    let ring = n["ring"]["mean"].as_f64().unwrap();
    // 12 ± 2 in the centre, 250 ± 33 in the ring.
    assert!((centre - 12.0).abs() <= 2.0, "centre {centre}");
    assert!((ring - 250.0).abs() <= 33.0, "ring {ring}");
    let files = files_under(dir.path());
    for f in ["pattern/mirrors.pbm", "pattern/target.pgm", "intensity/intensity.pgm", "image/fluorescence_sum.pgm"] {
        assert!(files.iter().any(|g| g == f), "{f} missing from {files:?}");
    }
}

#[test]
fn transport_writes_trace_and_recapture_metric() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_into(&load("transport.json"), dir.path(), Vec::new());
    assert_eq!(out.exit_code(), 0);
    let m = &report_json(dir.path())["metrics"]["transport"];
    let t_half = m["moves"][0]["half_period_us"].as_f64().unwrap();
    let peak_t = m["recapture_peak_time_after_release_us"].as_f64().unwrap();
    assert!(m["recapture_peak_fraction"].as_f64().unwrap() >= 0.8);
    assert!((peak_t - t_half).abs() <= 50.0, "{peak_t} vs {t_half}");
    assert!(m["moves"][0]["recapture_fraction"].as_f64().unwrap() > 0.8);
    // The centre of mass swings between start and end: period 2·T/2.
    let period = m["oscillation_period_us"].as_f64().unwrap();
    assert!((period / (2.0 * t_half) - 1.0).abs() < 0.05, "{period}");

    let trace = fs::read_to_string(dir.path().join("transport/oscillation.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("time_us,com_x_um"));
    let xs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let (lo, hi) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(lo < -3.0 && hi > 3.0, "{lo} {hi}");
    assert!(dir.path().join("transport/recapture.csv").exists());
}

#[test]
fn identical_seeds_give_byte_identical_reports() {
    let sc = load("transport.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_into(&sc, a.path(), Vec::new());
    run_into(&sc, b.path(), Vec::new());
    let ra = fs::read(a.path().join(REPORT_FILE)).unwrap();
    assert_eq!(ra, fs::read(b.path().join(REPORT_FILE)).unwrap());

    let c = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        seed: Some(sc.seed + 1),
        output_dir: Some(c.path().to_path_buf()),
        ..RunOptions::default()
    };
    run_scenario(&sc, &opts).unwrap();
    assert_ne!(ra, fs::read(c.path().join(REPORT_FILE)).unwrap());
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        let st = bin()
            .args(["simulate", "--scenario"])
            .arg(scenario_path("bullseye.json"))
            .arg("--out")
            .arg(dir.path())
            .args(["--threads", threads])
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(fs::read(a.path().join(REPORT_FILE)).unwrap(), fs::read(b.path().join(REPORT_FILE)).unwrap());
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    run_into(&load("bullseye.json"), dir.path(), vec![Stage::Potential]);
    let r = report_json(dir.path());
    let manifest = r["manifest"].as_array().unwrap();
    let listed: Vec<String> = manifest.iter().map(|e| e["path"].as_str().unwrap().to_string()).collect();
    let on_disk: Vec<String> = files_under(dir.path()).into_iter().filter(|f| f != REPORT_FILE).collect();
    assert_eq!(listed, on_disk);
    for e in manifest {
        let bytes = fs::read(dir.path().join(e["path"].as_str().unwrap())).unwrap();
        assert_eq!(e["bytes"].as_u64().unwrap(), bytes.len() as u64);
        assert_eq!(e["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
}

#[test]
fn stage_filter_runs_prerequisites_only() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["--stage", "optics", "--scenario"])
        .arg(scenario_path("bullseye.json"))
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let r = report_json(dir.path());
    let names: Vec<&str> = r["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(names, ["pattern", "intensity"]);
    assert!(r["metrics"]["intensity"]["visibility"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = write_scenario(dir.path(), r#"{"name": "x", "tof": {}}"#);
    let st = bin().arg("report").arg("--scenario").arg(&no_seed).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().arg("tof").arg("--scenario").arg(dir.path().join("missing.json")).status().unwrap();
    assert_eq!(st.code(), Some(2));

    // Parseable scenario, invalid shape: a report is still written.
    let out = dir.path().join("out");
    let bad = write_scenario(
        dir.path(),
        r#"{"name": "x", "seed": 1, "pattern": {"shapes": [{"kind": "disk", "center_um": [0, 0], "radius_um": -1}]}}"#,
    );
    let st = bin().arg("pattern").arg("--scenario").arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let r = report_json(&out);
    assert_eq!(r["stages"][0]["status"], "failed");
    assert_eq!(r["stages"][0]["error"]["kind"], "config");
}

#[test]
fn infeasible_plan_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(
        dir.path(),
        r#"{"name": "x", "seed": 1,
            "rearrange": {"sources_um": [[0, 0]], "targets_um": [[5, 0], [-5, 0]]},
            "tof": {"atoms": 200}}"#,
    );
    let out = dir.path().join("out");
    let st = bin().arg("report").arg("--scenario").arg(&sc).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(3));
    let r = report_json(&out);
    assert_eq!(r["status"], "failed");
    assert_eq!(r["exit_code"], 3);
    // Independent stages still run.
    let tof = r["stages"].as_array().unwrap().iter().find(|s| s["stage"] == "tof").unwrap();
    assert_eq!(tof["status"], "ok");
}

#[test]
fn numerical_precondition_exits_with_4_and_skips_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(
        dir.path(),
        r#"{"name": "x", "seed": 1,
            "pattern": {"shapes": [{"kind": "disk", "center_um": [0, 0], "radius_um": 4}]},
            "intensity": {"window_mirrors": [64, 64]},
            "simulate": {"mean_atoms": 10, "dt_us": 50, "duration_us": 100},
            "image": {}}"#,
    );
    let out = dir.path().join("out");
    let st = bin().arg("report").arg("--scenario").arg(&sc).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(4));
    let r = report_json(&out);
    let stages = r["stages"].as_array().unwrap();
    let get = |n: &str| stages.iter().find(|s| s["stage"] == n).unwrap().clone();
    assert_eq!(get("simulate")["error"]["kind"], "numerical");
    assert_eq!(get("image")["status"], "skipped");
    assert_eq!(get("potential")["status"], "ok");
}

#[test]
fn rearrange_and_tof_report_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let sc: Scenario = r#"{"name": "x", "seed": 5,
        "rearrange": {"sources_um": [[-10, 0], [0, 12], [10, 0]], "targets_um": [[-5, 0], [5, 0]]},
        "tof": {"atoms": 5000, "temperature_uK": 90}}"#
        .parse()
        .unwrap();
    let out = run_into(&sc, dir.path(), Vec::new());
    assert_eq!(out.exit_code(), 0);
    assert!(out.report.stages.iter().all(|s| s.status == StageStatus::Ok));
    let m = &report_json(dir.path())["metrics"];
    assert_eq!(m["rearrange"]["moves"], 2);
    assert!((m["rearrange"]["total_cost_um2"].as_f64().unwrap() - 50.0).abs() < 1e-6);
    assert!((m["tof"]["temperature_uK"].as_f64().unwrap() / 90.0 - 1.0).abs() < 0.07);
}
