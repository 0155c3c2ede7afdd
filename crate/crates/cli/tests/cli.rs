use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn placelens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_placelens"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, value: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_lattice() -> Value {
    json!({ "rows": 8, "cols": 8, "seed": 3 })
}

#[test]
fn simulate_path_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        &json!({ "out_dir": out, "bootstrap_b": 10, "taus": [0.5], "simulate": small_lattice() }),
    );
    let res = placelens(&["run", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for f in [
        "run_manifest.json",
        "data/panel.csv",
        "data/weights.json",
        "tables/ladder.csv",
        "tables/stacked.csv",
        "tables/equivalence.json",
        "tables/r2_ladder.csv",
        "tables/quantile_grid.csv",
        "report.md",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_object().map(|m| m.len()), Some(5));
}

#[test]
fn single_stage_subcommands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &small_lattice());
    let out_s = out.to_string_lossy().into_owned();
    let common = ["--config", &cfg, "--out", &out_s, "-B", "10", "--seed", "9"];
    for sub in ["simulate", "fit", "quantile", "report"] {
        let mut args = vec![sub];
        args.extend(common);
        let res = placelens(&args);
        assert_eq!(res.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&res.stderr));
    }
    assert!(out.join("tables/ladder.txt").is_file());
    assert!(out.join("figures/r2_ladder.svg").is_file());
}

#[test]
fn raw_inputs_with_mock_endpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let sim_out = tmp.path().join("sim");
    let cfg = write_config(tmp.path(), &json!({ "rows": 6, "cols": 6, "seed": 4 }));
    let res = placelens(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        sim_out.to_str().unwrap(),
        "--raw-inputs",
        raw.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        &json!({
            "out_dir": out,
            "bootstrap_b": 10,
            "taus": [0.5],
            "variants": ["baseline", "zip_fe"],
            "stack": { "specs": ["zip_fe"] },
            "inputs": {
                "manifest": raw.join("manifest.csv"),
                "acs": raw.join("acs.csv"),
                "geometry": raw.join("geometry.geojson"),
                "segmentation": raw.join("segmentation.csv")
            },
            "elicit": { "endpoint": "mock" }
        }),
    );
    let res = placelens(&["run", "--config", &cfg]);
    let code = res.status.code();
    assert!(matches!(code, Some(0) | Some(4)), "{code:?}: {}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("data/elicitation.jsonl").is_file());
    assert!(out.join("data/panel.csv").is_file());
    assert!(out.join("tables/stacked.csv").is_file());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), &json!({ "bootstrap_b": "many" }));
    assert_eq!(placelens(&["run", "--config", &bad]).status.code(), Some(2));

    let invalid = write_config(tmp.path(), &json!({ "taus": [1.5] }));
    assert_eq!(placelens(&["quantile", "--config", &invalid]).status.code(), Some(2));

    let out = tmp.path().join("o");
    let res = placelens(&["run", "--out", out.to_str().unwrap(), "--stages", "fit,teleport"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_stage_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    let res = placelens(&["fit", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
}
