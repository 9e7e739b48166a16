use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn mimic(config: &Path, extra: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_mimic"))
        .args(["run", "--config"])
        .arg(config)
        .args(extra)
        .output()
        .unwrap();
    out.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, mut cfg: Value) -> std::path::PathBuf {
    cfg["output_dir"] = json!(dir.join(name));
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn report(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name).join("report.json")).unwrap()).unwrap()
}

fn small_duality() -> Value {
    json!({
        "kind": "duality",
        "seed": 11,
        "simulation": { "n_paths": 20000, "step": 0.0078125 },
        "pde": { "counts": [33, 33], "steps": 16 }
    })
}

#[test]
fn simulate_writes_ensemble_and_support_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sim",
        json!({ "kind": "simulate", "seed": 1, "simulation": { "n_paths": 500, "block": 200, "export_paths": 3 } }),
    );
    assert_eq!(mimic(&cfg, &[]), 0);
    let r = report(tmp.path(), "sim");
    assert_eq!(r["passed"], json!(true));
    assert_eq!(r["result"]["support"]["violations"], json!(0));
    assert_eq!(r["result"]["support"]["paths"], json!(500));
    let csv = fs::read_to_string(tmp.path().join("sim/ensemble.csv")).unwrap();
    assert!(csv.lines().count() > 3);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("sim/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_clock_seconds"].as_f64().is_some());
}

#[test]
fn bad_configs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        json!({ "kind": "simulate" }),
        json!({ "kind": "simulate", "seed": 1, "bogus": 3 }),
        json!({ "kind": "simulate", "seed": 1, "simulation": { "step": -0.1 } }),
        json!({ "kind": "martingale", "seed": 1, "martingale": { "z_crit": 0.0 } }),
        json!({ "kind": "duality", "seed": 1, "pde": { "counts": [32, 33] } }),
        json!({ "kind": "teleport", "seed": 1 }),
        json!({ "kind": "simulate", "seed": 1, "start": [0.0, -0.5] }),
    ];
    for (i, c) in cases.into_iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}"), c);
        assert_eq!(mimic(&cfg, &[]), 2, "case {i}");
        assert!(!tmp.path().join(format!("bad{i}/report.json")).exists());
    }
    assert_eq!(mimic(&tmp.path().join("missing.json"), &[]), 2);
}

#[test]
fn duality_passes_and_broken_drift_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ok", small_duality());
    assert_eq!(mimic(&cfg, &[]), 0);
    let cfg = write_config(tmp.path(), "broken", small_duality());
    assert_eq!(mimic(&cfg, &["--break-generator", "drift"]), 1);
    let r = report(tmp.path(), "broken");
    assert_eq!(r["passed"], json!(false));
    assert!(r["result"]["gap"].as_f64().unwrap() > r["result"]["tolerance"].as_f64().unwrap());
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("broken/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["break_generator"], json!("drift"));
}

#[test]
fn full_mimic_with_regime_switching_driver() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mimic",
        json!({
            "kind": "full-mimic",
            "seed": 5,
            "simulation": { "n_paths": 6000, "block": 3000, "step": 0.0078125 },
            "projection": {
                "driver": { "type": "regime_switching" },
                "lattice": { "counts": [17, 16] },
                "min_occupancy": 5,
                "comparison": { "ks_threshold": 0.05 }
            },
            "validation": { "budget": { "delta": 1e-4, "K": 10, "nu": 1e-4, "alpha": 0.5 }, "point_budget": 300, "pair_budget": 300 }
        }),
    );
    assert_eq!(mimic(&cfg, &[]), 0);
    let r = report(tmp.path(), "mimic");
    assert!(r["result"]["comparison"]["max_ks"].as_f64().unwrap() <= 0.05);
    assert!(r["result"]["validation"].is_object());
    assert!(tmp.path().join("mimic/coefficients.csv").exists());
    assert!(tmp.path().join("mimic/coefficients.json").exists());
}

#[test]
fn projected_coefficients_load_as_a_gridded_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "proj",
        json!({
            "kind": "project",
            "seed": 9,
            "simulation": { "n_paths": 3000, "step": 0.0078125 },
            "projection": { "lattice": { "counts": [13, 12] }, "min_occupancy": 5 }
        }),
    );
    assert_eq!(mimic(&cfg, &[]), 0);
    let csv = tmp.path().join("proj/coefficients.csv");
    let cfg = write_config(
        tmp.path(),
        "resim",
        json!({
            "kind": "simulate",
            "seed": 9,
            "model": { "type": "gridded", "path": csv },
            "simulation": { "n_paths": 500, "step": 0.0078125 }
        }),
    );
    assert_eq!(mimic(&cfg, &[]), 0);
    assert_eq!(report(tmp.path(), "resim")["result"]["support"]["violations"], json!(0));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let base = json!({
        "kind": "project",
        "seed": 3,
        "simulation": { "n_paths": 2000, "block": 700, "step": 0.0078125 },
        "projection": { "lattice": { "counts": [13, 12] }, "min_occupancy": 5 }
    });
    let a = write_config(tmp.path(), "a", base.clone());
    let b = write_config(tmp.path(), "b", base);
    assert_eq!(mimic(&a, &[]), 0);
    assert_eq!(mimic(&b, &["--threads", "1"]), 0);
    for f in ["coefficients.csv", "coefficients.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let strip = |v: Value| {
        let mut v = v;
        v["result"]["coefficients_csv"] = Value::Null;
        v
    };
    assert_eq!(strip(report(tmp.path(), "a")), strip(report(tmp.path(), "b")));

    let sim = json!({ "kind": "simulate", "seed": 4, "simulation": { "n_paths": 300, "export_paths": 300 } });
    let a = write_config(tmp.path(), "sa", sim.clone());
    let b = write_config(tmp.path(), "sb", sim);
    assert_eq!(mimic(&a, &[]), 0);
    assert_eq!(mimic(&b, &[]), 0);
    assert_eq!(fs::read(tmp.path().join("sa/ensemble.csv")).unwrap(), fs::read(tmp.path().join("sb/ensemble.csv")).unwrap());
}

#[test]
fn pde_and_martingale_and_restart_run() {
    let tmp = tempfile::tempdir().unwrap();
    let pde = write_config(tmp.path(), "pde", json!({ "kind": "pde", "seed": 0, "pde": { "counts": [33, 33], "steps": 16 } }));
    assert_eq!(mimic(&pde, &[]), 0);
    let csv = fs::read_to_string(tmp.path().join("pde/solution.csv")).unwrap();
    assert!(csv.starts_with("t,x_1,x_2,u"));

    let mart = write_config(
        tmp.path(),
        "mart",
        json!({ "kind": "martingale", "seed": 2, "simulation": { "n_paths": 4000, "step": 0.0078125 } }),
    );
    assert_eq!(mimic(&mart, &[]), 0);
    let mart = write_config(
        tmp.path(),
        "mart_broken",
        json!({ "kind": "martingale", "seed": 2, "simulation": { "n_paths": 4000, "step": 0.0078125 } }),
    );
    assert_eq!(mimic(&mart, &["--break-generator", "drift"]), 1);

    let restart = write_config(
        tmp.path(),
        "restart",
        json!({
            "kind": "restart",
            "seed": 8,
            "simulation": { "n_paths": 3000, "step": 0.0078125 },
            "restart": { "bins": 1, "min_per_bin": 100, "ks_threshold": 0.1, "perturbation": [0.0, 0.05] }
        }),
    );
    assert_eq!(mimic(&restart, &[]), 1);
}
