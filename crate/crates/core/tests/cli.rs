use std::path::Path;
use std::process::{Command, Output};

use motion_instruct::instruct::{build_instruction, write_jsonl, PromptVariant, TaskKind};
use motion_instruct::vqvae::MotionTokenSeq;
use sha2::{Digest, Sha256};

fn mgpt(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgpt"))
        .args(args)
        .env("MGPT_CACHE", cache)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Hash of every file under `dir` except the manifest, by relative path.
fn tree_digest(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

fn manifest_hash(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn synth_data_is_counted_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = mgpt(
            tmp.path(),
            &["prepare-data", "--synth", "--n", "64", "--out", out.to_str().unwrap()],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(tree_digest(&a), tree_digest(&b));

    let o = mgpt(tmp.path(), &["prepare-data", "--data", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["clips"], 64);
}

#[test]
fn help_exits_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mgpt(tmp.path(), &["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("train-vqvae"));
    let o = mgpt(tmp.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_dataset");
    let o = mgpt(tmp.path(), &["prepare-data", "--data", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_dataset"), "{}", stderr(&o));
}

#[test]
fn pose_task_without_condition_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x.mfa");
    let o = mgpt(
        tmp.path(),
        &[
            "generate",
            "--task",
            "init",
            "--text",
            "a person walks",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("cond"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifact_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x.mfa");
    let o = mgpt(
        tmp.path(),
        &[
            "generate",
            "--task",
            "text",
            "--text",
            "a person walks",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("vqvae.ckpt"), "{}", stderr(&o));

    let jsonl = tmp.path().join("samples.jsonl");
    let sample = build_instruction(
        TaskKind::TextOnly,
        "a person walks",
        None,
        &MotionTokenSeq::new(vec![1, 2]).unwrap(),
        PromptVariant::V0,
    )
    .unwrap();
    write_jsonl(&jsonl, &[sample]).unwrap();
    let o = mgpt(tmp.path(), &["train-lm", "--data", jsonl.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("base.ckpt"), "{}", stderr(&o));
}

#[test]
fn manifest_hash_tracks_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = tmp.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    };
    let base = write("a.toml", "seed = 3\n");
    let same = write("b.toml", "seed = 3\n[vqvae]\nbeta = 0.25\n");
    let changed = write("c.toml", "seed = 3\n[vqvae]\nbeta = 0.5\n");
    let mut hashes = Vec::new();
    for (i, cfg) in [&base, &same, &changed].into_iter().enumerate() {
        let out = tmp.path().join(format!("d{i}"));
        let o = mgpt(
            tmp.path(),
            &[
                "prepare-data",
                "--synth",
                "--n",
                "8",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        hashes.push(manifest_hash(&out));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
}
