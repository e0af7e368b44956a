use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slap"))
        .args(args)
        .env_remove("SLAP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"patch_time": 4, "patch_mel": 32, "enc_dim": 8, "enc_layers": 1, "enc_heads": 2,
            "dec_dim": 8, "dec_layers": 1, "dec_heads": 2, "mlp_ratio": 2, "embed_dim": 8, "text_feat_dim": 32},
  "train": {"total_steps": 20, "warmup_steps": 5, "batch_size": 4, "checkpoint_every": 10, "base_lr": 0.001}
}"#;

fn synth_small(dir: &Path) -> PathBuf {
    let out = dir.join("corpus");
    let stdout = ok(&slap(&["synth", "--speakers", "8", "--clips-per", "2", "--out", p(&out)]));
    PathBuf::from(stdout.trim())
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn synth_writes_wavs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = ok(&slap(&["synth", "--speakers", "40", "--clips-per", "3", "--out", p(&a)]));
    ok(&slap(&["synth", "--speakers", "40", "--clips-per", "3", "--out", p(&b)]));
    let wavs = fs::read_dir(a.join("wav")).unwrap().count();
    assert_eq!(wavs, 120);
    let manifest = PathBuf::from(ma.trim());
    assert!(manifest.is_file());
    let name = manifest.file_name().unwrap();
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(b.join(name)).unwrap());
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "synth");
    assert_eq!(record["seed"], 0);
}

#[test]
fn synth_rejects_too_few_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let out = slap(&["synth", "--speakers", "2", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_dir_defaults_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slap"))
        .args(["synth", "--speakers", "4", "--clips-per", "1"])
        .env("SLAP_OUT_DIR", dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("run.json").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = slap(&["pretrain", "--manifests", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"total_steps": 10, "warmup_steps": 20}}"#).unwrap();
    let manifest = synth_small(dir.path());
    let out = slap(&["pretrain", "--config", p(&bad), "--manifests", p(&manifest), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(slap(&["evaluate", "--modes", "sideways", "--manifests", p(&manifest)]).status.code(), Some(2));
    assert_eq!(slap(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn pretrain_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    let ckpt = ok(&slap(&[
        "pretrain", "--config", p(&cfg), "--manifests", p(&manifest), "--out", p(&full), "--log-every", "0",
    ]));
    let ckpt = PathBuf::from(ckpt.trim());
    assert!(ckpt.is_file());
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(full.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["train"]["total_steps"], 20);

    // stop at 10 steps, then resume to 20
    let part = dir.path().join("part");
    ok(&slap(&[
        "pretrain", "--config", p(&cfg), "--manifests", p(&manifest), "--out", p(&part), "--steps", "10",
    ]));
    assert!(full.join("checkpoints").join("step-000010.json").is_file());
    let mid = part.join("final.json");
    ok(&slap(&[
        "pretrain", "--config", p(&cfg), "--manifests", p(&manifest), "--out", p(&part), "--from", p(&mid),
    ]));
    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(part.join("metrics.csv")).unwrap()
    );

    let ev = |out: &Path| {
        ok(&slap(&[
            "evaluate", "--checkpoint", p(&ckpt), "--manifests", p(&manifest), "--out", p(out), "--margins",
        ]))
    };
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let table = ev(&e1);
    ev(&e2);
    assert!(table.contains("zeroshot") && table.contains("overall"));
    for f in ["report.json", "report.csv", "margins.csv"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 9);

    let shown = ok(&slap(&["report", p(&e1.join("report.json"))]));
    assert!(shown.contains("synth_sex"));

    let zs = dir.path().join("zs");
    ok(&slap(&[
        "zeroshot", "--checkpoint", p(&ckpt), "--manifests", p(&manifest), "--out", p(&zs), "--task-ids", "synth_sex",
    ]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(zs.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);

    let pr = dir.path().join("pr");
    ok(&slap(&["probe", "--checkpoint", p(&ckpt), "--manifests", p(&manifest), "--out", p(&pr)]));

    // desk-default dimensions differ from the tiny checkpoint
    let desk = dir.path().join("desk.json");
    fs::write(&desk, "{}").unwrap();
    let out = slap(&[
        "zeroshot", "--checkpoint", p(&ckpt), "--config", p(&desk), "--manifests", p(&manifest), "--out", p(&zs),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("enc=8x1h2") && err.contains("enc=64x2h4"), "{err}");
}

#[test]
fn naive_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let out = dir.path().join("naive");
    let table = ok(&slap(&["evaluate", "--modes", "naive", "--manifests", p(&manifest), "--out", p(&out)]));
    assert!(table.contains("naive"));
    let missing = slap(&["zeroshot", "--manifests", p(&manifest), "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn gradcheck_gate() {
    let out = ok(&slap(&["gradcheck", "--cases", "3", "--filter", "clap"]));
    assert!(out.contains("clap_loss_tau"));
    assert_eq!(slap(&["gradcheck", "--filter", "no_such_op"]).status.code(), Some(2));
}
