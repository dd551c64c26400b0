use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[synth]
entities = 3
length = 80

[model]
lookback = 8
horizon = 2
model_dim = 8
ffn_dim = 8
mc_passes = 2

[train]
epochs = 2
steps_per_epoch = 2

[meta]
tasks_per_batch = 2
"#;

fn mmforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// A work directory with `run.toml`, a synthetic CSV and its processed form.
fn prepared() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    let o = mmforge(d, &["--config", "run.toml", "--output-dir", "raw", "synth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mmforge(d, &["--config", "run.toml", "--output-dir", "proc", "--dataset", "raw/data.csv", "preprocess"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    tmp
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let tmp = prepared();
    let d = tmp.path();
    let train = ["--config", "run.toml", "--output-dir", "run", "--dataset", "proc", "train"];
    assert_eq!(code(&mmforge(d, &train)), 0);
    let before = std::fs::read(d.join("run/checkpoint")).unwrap();
    let o = mmforge(d, &train);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let mut forced = train.to_vec();
    forced.push("--force");
    assert_eq!(code(&mmforge(d, &forced)), 0);
    assert_eq!(std::fs::read(d.join("run/checkpoint")).unwrap(), before);
    assert!(d.join("run/config.resolved").exists());
}

#[test]
fn usage_errors_exit_two() {
    let tmp = prepared();
    let d = tmp.path();
    assert_eq!(code(&mmforge(d, &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&mmforge(d, &["--output-dir", "x", "--config", "missing.toml", "synth"])), 2);
    assert_eq!(code(&mmforge(d, &["--config", "run.toml", "--output-dir", "x", "--set", "model.bogus=1", "synth"])), 2);
    assert_eq!(
        code(&mmforge(d, &["--config", "run.toml", "--output-dir", "x", "--dataset", "nowhere", "train"])),
        2
    );
    let o = mmforge(d, &["--config", "run.toml", "--output-dir", "empty", "--dataset", "proc", "evaluate"]);
    assert_eq!(code(&o), 2, "missing checkpoint");
    let o = Command::new(env!("CARGO_BIN_EXE_mmforge"))
        .current_dir(d)
        .env("MMFORGE_THREADS", "0")
        .args(["--output-dir", "x", "synth"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn forecast_validates_entity_and_history() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--config", "run.toml", "--output-dir", "run", "--dataset", "proc"];
    assert_eq!(code(&mmforge(d, &[&base[..], &["train"]].concat())), 0);
    let o = mmforge(d, &[&base[..], &["forecast", "--entity", "nobody", "--from", "40"]].concat());
    assert_eq!(code(&o), 2);
    let o = mmforge(d, &[&base[..], &["forecast", "--entity", "e000", "--from", "3"]].concat());
    assert_eq!(code(&o), 2);
    let o = mmforge(d, &[&base[..], &["forecast", "--entity", "e000", "--from", "40"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().next(), Some("entity,timestamp,feature,y_pred,mc_std"));
    assert_eq!(stdout.lines().count(), 1 + 2 * 3);
}

#[test]
fn history_names_the_training_path() {
    let tmp = prepared();
    let d = tmp.path();
    let run = |dir: &str, extra: &[&str]| {
        let mut args = vec!["--config", "run.toml", "--output-dir", dir, "--dataset", "proc"];
        args.extend_from_slice(extra);
        args.push("train");
        assert_eq!(code(&mmforge(d, &args)), 0);
    };
    run("meta", &[]);
    run("plain", &["--set", "model.disable_maml=true"]);
    assert_eq!(header(&d.join("meta/history.csv")), "epoch,train_meta_loss,val_mse");
    assert_eq!(header(&d.join("plain/history.csv")), "epoch,train_mse,val_mse");
    assert_eq!(std::fs::read_to_string(d.join("meta/history.csv")).unwrap().lines().count(), 3);
}

#[test]
fn divergence_exits_one_and_keeps_partial_history() {
    let tmp = prepared();
    let d = tmp.path();
    let o = mmforge(
        d,
        &["--config", "run.toml", "--output-dir", "run", "--dataset", "proc", "--set", "meta.meta_lr=1e300", "train"],
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("run/history.csv").exists());
    assert!(!d.join("run/checkpoint").exists());
}

#[test]
fn ablation_grid_has_four_variants_and_medians() {
    let tmp = prepared();
    let d = tmp.path();
    for (seeds, runs) in [("[7]", 4), ("[1, 2, 3]", 12)] {
        let dir = format!("abl{runs}");
        let set = format!("ablate.seeds={seeds}");
        let o = mmforge(d, &["--config", "run.toml", "--output-dir", &dir, "--dataset", "proc", "--set", &set, "ablate"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(d.join(&dir).join("report.csv")).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), runs + 4);
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some("median")).count(), 4);
    }
}

#[test]
fn evaluate_reports_requested_horizons() {
    let tmp = prepared();
    let d = tmp.path();
    let base = ["--config", "run.toml", "--output-dir", "run", "--dataset", "proc"];
    assert_eq!(code(&mmforge(d, &[&base[..], &["train"]].concat())), 0);
    let eval = ["--config", "run.toml", "--output-dir", "eval", "--dataset", "proc", "evaluate", "--checkpoint", "run/checkpoint"];
    let o = mmforge(d, &[&eval[..], &["--horizons", "1,2", "--denormalized"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["per_horizon"].as_array().unwrap().len(), 2);
    assert_eq!(report["meta"]["denormalized"], true);
    let o = mmforge(d, &[&eval[..], &["--horizons", "5", "--force"]].concat());
    assert_eq!(code(&o), 2);
}
