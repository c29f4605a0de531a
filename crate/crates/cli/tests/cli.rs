use std::path::Path;
use std::process::{Command, Output};

use ropo::metrics::EvalReport;

fn ropo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ropo"))
        .args(args)
        .env("ROPO_LOG", "quiet")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = ropo(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    o
}

/// Tiny corpus, SFT model and RoPO run in `dir`.
fn small_run(dir: &Path) {
    let cfg = dir.join("gen.json");
    std::fs::write(&cfg, r#"{"n_train": 24, "n_dev": 6, "content_vocab": 12}"#).unwrap();
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&dir.join("data"))]);
    let sft_cfg = dir.join("sft.json");
    std::fs::write(&sft_cfg, r#"{"d_model": 16, "d_ff": 32, "batch_size": 4}"#).unwrap();
    ok(&["sft", "--config", p(&sft_cfg), "--data", p(&dir.join("data")), "--out", p(&dir.join("sft.rpck")), "--steps", "3"]);
    ok(&[
        "align", "--method", "ropo", "--sft", p(&dir.join("sft.rpck")), "--data", p(&dir.join("data")),
        "--out", p(&dir.join("ropo")), "--steps", "3", "--batch-size", "4",
    ]);
}

#[test]
fn usage_errors_exit_one() {
    let o = ropo(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));

    let o = ropo(&["gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--out"));

    assert_eq!(code(&ropo(&["--help"])), 0);
    assert_eq!(code(&ropo(&["eval", "--n-prompts", "many"])), 1);

    let o = Command::new(env!("CARGO_BIN_EXE_ropo"))
        .args(["gen-data", "--out", "x"])
        .env("ROPO_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn config_errors_exit_one_and_data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_train": 10, "colour": "blue"}"#).unwrap();
    let o = ropo(&["gen-data", "--config", p(&bad), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error[config]"), "{}", stderr(&o));

    // an unreadable config file is a configuration problem, not a data one
    let o = ropo(&["gen-data", "--config", p(&tmp.path().join("missing.json")), "--out", "d"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let o = ropo(&["sft", "--data", p(&tmp.path().join("nowhere")), "--out", p(&tmp.path().join("s.rpck"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[io]"), "{}", stderr(&o));

    let garbage = tmp.path().join("garbage.rpck");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = ropo(&["diagnose", "--before", p(&garbage), "--after", p(&garbage), "--out", p(&tmp.path().join("e.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[format]"), "{}", stderr(&o));
}

#[test]
fn pipeline_commands_write_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_run(dir);
    for m in ["data/manifest.json", "sft.rpck.manifest.json", "ropo/manifest.json"] {
        assert!(dir.join(m).exists(), "{m}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ropo/manifest.json")).unwrap()).unwrap();
    // full rotation on q and v of two layers of width 16: 4 · (2·15 + 16)
    assert_eq!(manifest["details"]["trainable_parameters"], 184);
    assert_eq!(manifest["details"]["method"], "ropo-full");
}

#[test]
fn diagnose_of_identical_checkpoints_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_run(dir);
    let sft = dir.join("sft.rpck");
    let out = dir.join("energy.csv");
    let o = ok(&["diagnose", "--before", p(&sft), "--after", p(&sft), "--out", p(&out)]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "sahe 0.0");
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let delta = headers.iter().position(|h| h == "delta").unwrap();
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    // six matrices, then the sahe footer
    assert_eq!(rows.len(), 7);
    assert_eq!(&rows[6][0], "sahe");
    assert!(rows.iter().all(|r| r[delta].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn merged_checkpoint_evaluates_like_attached_adapter() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_run(dir);
    let (sft, data) = (dir.join("sft.rpck"), dir.join("data"));
    let adapter = dir.join("ropo/adapter.rpck");
    let merged = dir.join("merged.rpck");
    ok(&["merge", "--base", p(&sft), "--adapter", p(&adapter), "--out", p(&merged)]);
    let (ea, eb) = (dir.join("attached.json"), dir.join("merged.json"));
    ok(&["eval", "--ckpt", p(&sft), "--adapter", p(&adapter), "--reference", p(&sft), "--data", p(&data), "--out", p(&ea)]);
    ok(&["eval", "--ckpt", p(&merged), "--reference", p(&sft), "--data", p(&data), "--out", p(&eb)]);
    let a = EvalReport::load_json(&ea).unwrap();
    let b = EvalReport::load_json(&eb).unwrap();
    assert!(a.same_content(&b), "{a:?}\n{b:?}");
    assert!(dir.join("merged.csv").exists());
}
