use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arx-ddpc"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("spawn binary")
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--config", "no/such/file.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/file.toml"));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn malformed_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "bad.csv", "t,u_1,y_1\n0,1.0,2.0\n1,abc,3.0\n");
    let out = run(dir.path(), &["identify", "--data", &data, "--method", "ols"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = run(dir.path(), &["--out-dir", name, "--seed", "5", "simulate"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["train.csv", "manifest.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
    let text = std::fs::read_to_string(dir.path().join("a/train.csv")).unwrap();
    assert_eq!(text.lines().count(), 151);
}

#[test]
fn ols_recovers_noise_free_arx_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("t,u_1,y_1\n");
    let mut y_prev = 0.0;
    let mut u_prev = 0.0;
    for t in 0..200 {
        let u = ((t * 7919) % 101) as f64 / 50.0 - 1.0;
        let y = 0.5 * y_prev + 0.8 * u_prev;
        csv.push_str(&format!("{t},{u},{y}\n"));
        y_prev = y;
        u_prev = u;
    }
    let data = write(dir.path(), "arx.csv", &csv);
    let config = write(dir.path(), "c.toml", "[arx]\nna = 1\nnb = 1\n");
    let out = run(dir.path(), &["--config", &config, "identify", "--data", &data, "--method", "ols"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let post = json(&dir.path().join("out/posterior.json"));
    assert!(post["residual_rms"].as_f64().unwrap() < 1e-8, "{post}");
    let theta: Vec<f64> = post["theta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((theta[0] - 0.5).abs() < 1e-8 && (theta[1] - 0.8).abs() < 1e-8, "{theta:?}");
}

#[test]
fn ss_identification_keeps_hyperparameters_in_bounds() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["simulate"]).status.success());
    let out = run(dir.path(), &["identify", "--data", "out/train.csv", "--method", "ss"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let k = &json(&dir.path().join("out/posterior.json"))["kernel"];
    for key in ["c_y", "c_u"] {
        let c = k[key].as_f64().unwrap();
        assert!((1e-8..=1e4).contains(&c), "{key}={c}");
    }
    for key in ["lambda_y", "lambda_u"] {
        let l = k[key].as_f64().unwrap();
        assert!((0.5..=0.999).contains(&l), "{key}={l}");
    }
}

#[test]
fn ssw_without_wbar_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["simulate"]).status.success());
    let out = run(dir.path(), &["identify", "--data", "out/train.csv", "--method", "ssw"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_monte_carlo_writes_one_summary_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "mc.toml", "[experiment]\nn_mc = 2\nvariants = [\"OLS\"]\n");
    let out = run(dir.path(), &["--config", &config, "monte-carlo"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/mc_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2, "{summary}");
    assert!(summary.lines().nth(1).unwrap().starts_with("OLS,"));
    let results = json(&dir.path().join("out/mc_results.json"));
    assert_eq!(results["runs"].as_array().unwrap().len(), 2);
    let manifest = json(&dir.path().join("out/manifest.json"));
    assert_eq!(manifest["created_unix"].as_u64(), Some(0));
    assert!(!dir.path().join("out/mc_results.partial.jsonl").exists());
}
