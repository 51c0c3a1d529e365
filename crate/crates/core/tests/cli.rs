use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shilnikov-lab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("lab.ini");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn fixed_points_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\nk_min = 10\nk_max = 25\n");
    let out = dir.path().join("out");
    let out_s = out.display().to_string();
    let first = run(&["fixed-points", "--config", &cfg, "--out", &out_s, "--jobs", "3"]);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let csv_a = fs::read(out.join("fixed_points.csv")).unwrap();
    let second = run(&["fixed-points", "--config", &cfg, "--out", &out_s, "--jobs", "1"]);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(fs::read(out.join("fixed_points.csv")).unwrap(), csv_a);
    assert_eq!(String::from_utf8_lossy(&csv_a).lines().count(), 17);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "fixed-points");
    assert_eq!(manifest["exit_code"], 0);
}

#[test]
fn flags_override_config_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let r = run(&[
        "fixed-points",
        "--config",
        &cfg,
        "--out",
        &out.display().to_string(),
        "--k-min",
        "5",
        "--k-max",
        "7",
        "--seed",
        "42",
    ]);
    assert_eq!(r.status.code(), Some(0));
    let text = fs::read_to_string(out.join("fixed_points.csv")).unwrap();
    let ks: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["5", "6", "7"]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn malformed_config_exits_two_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["[map]\nrho = abc\n", "[nonsense]\n", "[map]\nunknown_key = 1\n", "[map]\nrho = 0\n"] {
        let cfg = write_config(dir.path(), text);
        let out = dir.path().join("bad");
        let r = run(&["fixed-points", "--config", &cfg, "--out", &out.display().to_string()]);
        assert_eq!(r.status.code(), Some(2), "{text:?}");
        assert!(!out.join("fixed_points.csv").exists());
    }
    let r = run(&["spectrum", "--config", "/nonexistent/lab.ini", "--out", &dir.path().display().to_string()]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn spectrum_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let out_s = out.display().to_string();
    let cfg = write_config(dir.path(), "");
    assert_eq!(run(&["spectrum", "--config", &cfg, "--out", &out_s]).status.code(), Some(0));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(out.join("spectrum.json")).unwrap()).unwrap();
    assert_eq!(rep["eigenvalues"].as_array().unwrap().len(), 4);
    assert_eq!(rep["c4"], true);
    let cfg = write_config(dir.path(), "[example]\neps = 0.0\n");
    assert_eq!(run(&["spectrum", "--config", &cfg, "--out", &out_s]).status.code(), Some(3));
}

#[test]
fn hetero_search_grid_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("h");
    let out_s = out.display().to_string();
    let r = run(&["hetero-search", "--config", &cfg, "--out", &out_s, "--j0-min", "4", "--j0-max", "5"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(out.join("hetero.jsonl")).unwrap();
    let cells: Vec<(i64, i64)> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["j0"].as_i64().unwrap(), v["k"].as_i64().unwrap())
        })
        .collect();
    let expected: Vec<(i64, i64)> = (4..=5).flat_map(|j| (3..=10).map(move |k| (j, k))).collect();
    assert_eq!(cells, expected);
    let r = run(&["hetero-search", "--config", &cfg, "--out", &out_s, "--k-min", "3", "--k-max", "4"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn default_config_round_trips() {
    let r = run(&["default-config"]);
    assert_eq!(r.status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &String::from_utf8(r.stdout).unwrap());
    let out = dir.path().join("d");
    assert_eq!(run(&["spectrum", "--config", &cfg, "--out", &out.display().to_string()]).status.code(), Some(0));
}
