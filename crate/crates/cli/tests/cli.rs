use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppea::training::LogRecord;

fn ppea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppea")).args(args).env("PPEA_THREADS", "1").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_synth(dir: &Path) -> PathBuf {
    let p = dir.join("synth.json");
    fs::write(&p, r#"{"height": 32, "width": 64}"#).unwrap();
    p
}

fn synth(dir: &Path, variant: &str, count: &str, seed: &str) -> PathBuf {
    let cfg = small_synth(dir);
    let o = ppea(&[
        "synth", "--variant", variant, "--count", count, "--seed", seed,
        "--out", dir.join("data").to_str().unwrap(), "--config", cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(stdout(&o).trim())
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_run_config(dir: &Path, name: &str, stage2_init: Option<&str>) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 5,
        "output_dir": name,
        "dtype": "f32",
        "stage1": {
            "stage": 1, "epochs": 1, "batch_size": 2, "lr_schedule": [[0, 1e-3]],
            "dataset_path": "data/static"
        },
        "stage2": {
            "stage": 2, "epochs": 1, "batch_size": 2, "lr_schedule": [[0, 1e-4]],
            "dataset_path": "data/dynamic", "init_from": stage2_init
        }
    });
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn synth_is_reproducible_and_validates_variant() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = synth(a.path(), "dynamic", "3", "9");
    assert!(manifest.ends_with("dynamic/manifest.json") && manifest.is_file());
    synth(b.path(), "dynamic", "3", "9");
    assert_eq!(files(&a.path().join("data")), files(&b.path().join("data")));

    let o = ppea(&["synth", "--variant", "rainy", "--count", "2", "--out", a.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn train_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "static", "4", "1");
    synth(d, "dynamic", "4", "2");

    let no_init = write_run_config(d, "missing", None);
    let o = ppea(&["train", "--config", no_init.to_str().unwrap(), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = write_run_config(d, "progressive", Some("progressive/stage1.ckpt"));
    let o = ppea(&["train", "--config", cfg.to_str().unwrap(), "--stage", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = d.join("progressive");
    assert!(run.join("stage1.ckpt").is_file());
    let log = fs::read_to_string(run.join("stage1.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        serde_json::from_str::<LogRecord>(line).unwrap();
    }
    let o = ppea(&["train", "--config", cfg.to_str().unwrap(), "--stage", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("stage2.ckpt").is_file());

    let other = write_run_config(d, "other", None);
    let o = ppea(&["train", "--config", other.to_str().unwrap(), "--stage", "1"]);
    assert!(o.status.success());
    let o = ppea(&[
        "train", "--config", other.to_str().unwrap(), "--stage", "2",
        "--init-from", d.join("other/stage1.ckpt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ckpt = run.join("stage2.ckpt");
    for net in ["teacher", "student"] {
        let o = ppea(&[
            "eval", "--ckpt", ckpt.to_str().unwrap(), "--dataset", d.join("data/dynamic").to_str().unwrap(),
            "--network", net,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("abs_rel"));
        let report: serde_json::Value =
            serde_json::from_slice(&fs::read(run.join(format!("stage2.{net}.eval.json"))).unwrap()).unwrap();
        assert_eq!(report["frames"].as_array().unwrap().len(), 4);
    }
    let o = ppea(&["eval", "--ckpt", "nope.ckpt", "--dataset", d.join("data/dynamic").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let csv = d.join("curves.csv");
    let o = ppea(&["report", "--runs", run.to_str().unwrap(), d.join("other").to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.contains("progressive (stage 2)") && table.contains("other (stage 2)"));
    let csv = fs::read_to_string(&csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "run,stage,epoch,lr,mean_loss,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3");
    // two runs x two stages x (epoch 0 + one epoch)
    assert_eq!(lines.count(), 8);

    let o = ppea(&["report", "--runs", d.join("absent").to_str().unwrap(), "--out", d.join("x.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = ppea(&["gradcheck", "--seed", "1", "--dtype", "f64"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let table = stdout(&o);
    assert!(table.contains("conv2d") && table.contains("teacher_network_32x32"));
    assert!(!table.contains("FAIL"));

    let o = ppea(&["gradcheck", "--inject-fault", "conv-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"seed": 1, "output_dir": "x", "stage1": null, "stage2": null, "learning_rate": 3}"#).unwrap();
    let o = ppea(&["train", "--config", p.to_str().unwrap(), "--stage", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn shipped_config_resolves_both_stages() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let run = ppea_cli::RunConfig::load(&path).unwrap();
    let base = path.parent().unwrap();
    let s1 = run.stage(1, base, None).unwrap();
    let s2 = run.stage(2, base, None).unwrap();
    assert!(s1.init_from.is_none());
    assert!(s2.init_from.unwrap().ends_with("runs/progressive/stage1.ckpt"));
    assert_ne!(s1.seed, s2.seed);
}
