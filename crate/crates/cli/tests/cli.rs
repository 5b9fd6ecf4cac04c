use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn colorshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colorshift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, resolution: usize, epochs: u64) -> PathBuf {
    let text = format!(
        r#"{{
    "dataset": {{"kind": "grf", "count": 12, "resolution": {resolution}}},
    "model": {{"kind": "modified", "widths": [4, 4, 8, 8], "res_blocks": 1,
              "embedding_dim": 8, "time_dim": 8, "bypass_hidden": 8}},
    "train": {{"epochs": {epochs}, "batch_size": 4}},
    "sampler": {{"n_steps": 8}},
    "diagnostics": {{"sample_count": 12}}
}}"#
    );
    let path = dir.join(format!("config-{resolution}-{epochs}.json"));
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_log_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 16, 1);
    let run = dir.path().join("run");
    let o = colorshift(&["train", "--config", arg(&cfg), "--run-dir", arg(&run), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint/meta.json", "loss.csv", "config.json", "VERSION"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("config.json")).unwrap();
    assert!(resolved.contains("\"learning_rate\": 0.001"));
    assert!(fs::read_to_string(run.join("VERSION")).unwrap().starts_with("colorshift "));
}

#[test]
fn rerun_gives_identical_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 16, 1);
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let o = colorshift(&["train", "--config", arg(&cfg), "--run-dir", arg(&run), "--seed", "5", "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/loss.csv")).unwrap());
}

#[test]
fn bad_resolution_is_a_config_error_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 44, 1);
    let run = dir.path().join("run");
    let o = colorshift(&["train", "--config", arg(&cfg), "--run-dir", arg(&run)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("divisible by 8"), "{}", stderr(&o));
    assert!(!run.exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"dataset": {"kind": "grf", "count": 4, "resolution": 8}, "model": {"kind": "baseline"}, "trian": {}}"#,
    )
    .unwrap();
    let o = colorshift(&["train", "--config", arg(&cfg), "--run-dir", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = colorshift(&["train", "--config", arg(&dir.path().join("nope.json"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nope.json"));
}

fn pngs(run: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<PathBuf> = fs::read_dir(run.join("samples/png"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn sampling_from_fresh_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 16, 0);
    let run = dir.path().join("run");
    let o = colorshift(&["train", "--config", arg(&cfg), "--run-dir", arg(&run), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let sample = |ema: bool, seed: &str| {
        let mut args = vec!["sample", "--run-dir", arg(&run), "--count", "4", "--seed", seed];
        if ema {
            args.push("--use-ema");
        }
        let o = colorshift(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        (pngs(&run), fs::read(run.join("samples/samples.f32")).unwrap())
    };
    let (png_a, raw_a) = sample(false, "3");
    assert_eq!(png_a.len(), 4);
    assert_eq!(raw_a.len(), 4 * 16 * 16 * 4);
    assert!(raw_a
        .chunks_exact(4)
        .all(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]).is_finite()));
    // without training the moving average equals the parameters
    let (png_ema, raw_ema) = sample(true, "3");
    assert_eq!(raw_ema, raw_a);
    assert_eq!(png_ema, png_a);
    let (png_again, _) = sample(false, "3");
    assert_eq!(png_again, png_a);
    let (_, raw_other) = sample(false, "4");
    assert_ne!(raw_other, raw_a);
    assert!(fs::read_to_string(run.join("samples/sampler.json")).unwrap().contains("\"n_steps\": 8"));
}

#[test]
fn sample_without_checkpoint_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = colorshift(&["sample", "--run-dir", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn diagnose_complete_run_and_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 16, 1);
    let run = dir.path().join("run");
    assert!(colorshift(&["train", "--config", arg(&cfg), "--run-dir", arg(&run), "--quiet"]).status.success());
    assert!(colorshift(&["sample", "--run-dir", arg(&run), "--count", "3"]).status.success());
    let o = colorshift(&["diagnose", "--run-dir", arg(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["stats.csv", "kde.csv", "wasserstein.csv", "losses.csv", "spectra.csv"] {
        assert!(run.join("report").join(f).exists(), "{f}");
    }
    let losses = fs::read_to_string(run.join("report/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = colorshift(&["diagnose", "--run-dir", arg(&empty)]);
    assert_eq!(o.status.code(), Some(4));
    let msg = stderr(&o);
    assert!(msg.contains("config.json") && msg.contains("samples.f32"), "{msg}");
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 16, 1);
    let mut blobs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = colorshift(&["synth", "--config", arg(&cfg), "--run-dir", arg(&out), "--seed", "11"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("config.json").exists());
        let blob = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "f32"))
            .unwrap();
        blobs.push(fs::read(blob).unwrap());
    }
    assert_eq!(blobs[0], blobs[1]);
    assert_eq!(blobs[0].len(), 12 * 16 * 16 * 4);
}

#[test]
fn synth_rejects_idx_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"dataset": {"kind": "idx", "path": "x", "count": 4, "resolution": 8}, "model": {"kind": "baseline"}}"#,
    )
    .unwrap();
    let o = colorshift(&["synth", "--config", arg(&cfg), "--run-dir", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}
