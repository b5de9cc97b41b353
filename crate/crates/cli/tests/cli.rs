use std::path::Path;
use std::process::{Command, Output};

fn parkdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parkdiff"))
        .args(args)
        .arg("--run-dir")
        .arg(dir)
        .env_remove("PARKDIFF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const TINY: &str = r#"{
  "seed": 3,
  "model": {"d": 8, "heads": 2, "transformer_layers": 1, "type_dim": 4, "k": 2, "step_embedding": 4, "denoiser_mult": 1},
  "train": {"denoiser_iterations": 2, "initializer_iterations": 2, "batch_size": 2},
  "synth": {"scenes": 2}
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&parkdiff(a.path(), &["synth", "--scenes", "3", "--seed", "9"]));
    ok(&parkdiff(b.path(), &["synth", "--scenes", "3", "--seed", "9"]));
    let fa = std::fs::read(a.path().join("scenes.jsonl")).unwrap();
    assert_eq!(fa, std::fs::read(b.path().join("scenes.jsonl")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["commands"]["synth"]["outputs"][0], "scenes.jsonl");
}

#[test]
fn seed_comes_from_environment_unless_flagged() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, env: &str, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_parkdiff"));
        c.args(["synth", "--scenes", "1", "--run-dir"]).arg(dir).env("PARKDIFF_SEED", env);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        ok(&c.output().unwrap());
        std::fs::read(dir.join("scenes.jsonl")).unwrap()
    };
    let env_seeded = run(a.path(), "4", None);
    let flagged = run(b.path(), "5", Some("4"));
    assert_eq!(env_seeded, flagged);
}

#[test]
fn oracle_evaluation_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    ok(&parkdiff(dir.path(), &["synth", "--scenes", "2"]));
    let data = dir.path().join("scenes.jsonl");
    ok(&parkdiff(dir.path(), &["eval", "--oracle", "--data", data.to_str().unwrap()]));
    let mut r = csv::Reader::from_path(dir.path().join("report.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[2].parse::<f64>().unwrap(), 0.0, "{rec:?}");
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"dd": 1}}"#).unwrap();
    let out = parkdiff(dir.path(), &["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dd"));

    let out = parkdiff(dir.path(), &["synth", "--d", "63"]);
    assert_eq!(out.status.code(), Some(1));
    let out = parkdiff(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = parkdiff(dir.path(), &["eval", "--checkpoint", "ekf", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.pkdf");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    ok(&parkdiff(dir.path(), &["synth", "--scenes", "1"]));
    let data = dir.path().join("scenes.jsonl");
    let out = parkdiff(dir.path(), &["eval", "--checkpoint", junk.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn help_lists_config_fields() {
    let out = Command::new(env!("CARGO_BIN_EXE_parkdiff")).arg("--help").output().unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["model.schedule.tau", "train.lambda_ce", "eval.miss_rate", "PARKDIFF_SEED"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn train_predict_eval_ablate_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    ok(&parkdiff(d, &["synth", "--config", &cfg]));
    let data = d.join("scenes.jsonl");
    let data = data.to_str().unwrap();
    ok(&parkdiff(d, &["train", "--config", &cfg, "--stage", "1", "--data", data]));
    let stage1 = d.join("stage1.pkdf");
    let out = parkdiff(d, &["train", "--config", &cfg, "--stage", "2", "--data", data]);
    assert_eq!(out.status.code(), Some(1), "stage 2 without --init");
    ok(&parkdiff(d, &["train", "--config", &cfg, "--stage", "2", "--data", data, "--init", stage1.to_str().unwrap()]));
    let model = d.join("model.pkdf");
    let model = model.to_str().unwrap();
    assert!(d.join("train_log_stage2.csv").exists());

    ok(&parkdiff(d, &["predict", "--config", &cfg, "--checkpoint", model, "--data", data]));
    let first = std::fs::read_to_string(d.join("predictions.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["agents"][0]["candidates"].as_array().unwrap().len(), 2);
    ok(&parkdiff(d, &["predict", "--config", &cfg, "--checkpoint", model, "--data", data]));
    assert_eq!(first, std::fs::read_to_string(d.join("predictions.jsonl")).unwrap());

    ok(&parkdiff(d, &["eval", "--config", &cfg, "--checkpoint", model, "--data", data]));
    ok(&parkdiff(d, &["ablate", "--config", &cfg, "--kind", "mask", "--checkpoint", model, "--data", data]));
    let mut r = csv::Reader::from_path(d.join("ablate_mask.csv")).unwrap();
    let mut settings: Vec<String> = r.records().map(|x| x.unwrap()[0].to_string()).collect();
    settings.dedup();
    assert_eq!(settings, ["mask_0", "mask_25", "mask_50", "mask_75", "mask_100"]);
    ok(&parkdiff(d, &["ablate", "--config", &cfg, "--kind", "buckets", "--checkpoint", model, "--data", data]));
    ok(&parkdiff(d, &["plot", "--config", &cfg, "--checkpoint", model, "--data", data, "--sample", "1"]));
    let svg = std::fs::read_to_string(d.join("plot_1.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
    let out = parkdiff(d, &["plot", "--config", &cfg, "--checkpoint", model, "--data", data, "--sample", "100000"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn component_ablation_retrains_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    ok(&parkdiff(d, &["synth", "--config", &cfg]));
    let data = d.join("scenes.jsonl");
    let data = data.to_str().unwrap();
    ok(&parkdiff(d, &["ablate", "--config", &cfg, "--precision", "f32", "--kind", "components", "--data", data, "--train-data", data]));
    for v in ["full", "no_map", "no_type", "no_kinematics"] {
        assert!(d.join(format!("{v}.pkdf")).exists(), "{v}");
    }
}
