//! End-to-end runs of the `mclr` binary on a tiny, briefly trained model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const FRAMES: &str = "32";

fn mclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclr"))
        .args(args)
        .env_clear()
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = mclr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON line")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    ckpt: PathBuf,
}

/// A 48-clip corpus and a checkpoint after 10 steps, shared by every test.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        let ckpt = dir.path().join("ckpt");
        let made = ok(&[
            "corpus",
            "--out",
            p(&corpus),
            "--size",
            "48",
            "--seed",
            "1",
            "--frames",
            FRAMES,
        ]);
        assert_eq!(made["samples"], 48);
        let trained = ok(&[
            "train",
            "--corpus",
            p(&corpus),
            "--out",
            p(&ckpt),
            "--steps",
            "10",
            "--batch-size",
            "8",
        ]);
        assert_eq!(trained["step"], 10);
        Fixture {
            _dir: dir,
            corpus,
            ckpt,
        }
    })
}

#[test]
fn train_smoke_run_and_resume_continue_the_step_count() {
    let f = fixture();
    assert_eq!(read_json(&f.ckpt.join("manifest.json"))["step"], 10);
    let log = read_json(&f.ckpt.join("train_log.json"));
    assert_eq!(log["losses"].as_array().unwrap().len(), 10);
    assert!(log["losses"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l.as_f64().unwrap().is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let resumed = dir.path().join("resumed");
    let out = ok(&[
        "train",
        "--corpus",
        p(&f.corpus),
        "--out",
        p(&resumed),
        "--resume",
        p(&f.ckpt),
        "--steps",
        "5",
        "--batch-size",
        "8",
    ]);
    assert_eq!(out["step"], 15);
    assert_eq!(read_json(&resumed.join("manifest.json"))["step"], 15);
    assert_eq!(read_json(&resumed.join("train_log.json"))["start_step"], 10);
}

#[test]
fn invalid_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = mclr(&[
        "train",
        "--corpus",
        "/nonexistent/corpus.jsonl",
        "--out",
        p(dir.path()),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/corpus.jsonl"));

    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{not json}\n").unwrap();
    let out = mclr(&[
        "train",
        "--corpus",
        p(&garbage),
        "--out",
        p(&dir.path().join("c")),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = mclr(&[
        "gen",
        "--ckpt",
        p(&dir.path().join("missing")),
        "--prompt",
        "a man jumps.",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let attn = dir.path().join("a.mclr");
    let motion = dir.path().join("m.json");
    for args in [
        vec!["gen", "--bogus"],
        vec!["count", "--attn", p(&attn), "--motion", p(&motion)],
        vec!["count"],
        vec![
            "edit",
            "--ckpt",
            p(&f.ckpt),
            "--base-prompt",
            "a man jumps.",
            "--directive",
            "{\"op\":\"twirl\"}",
            "--out-dir",
            p(dir.path()),
        ],
        vec![
            "edit",
            "--ckpt",
            p(&f.ckpt),
            "--base-prompt",
            "a man jumps.",
            "--directive",
            "{\"op\":\"emphasize\",\"word_index\":9,\"weight\":0.2}",
            "--out-dir",
            p(dir.path()),
        ],
        vec![
            "gen",
            "--ckpt",
            p(&f.ckpt),
            "--prompt",
            "a man jumps.",
            "--sample-steps",
            "0",
        ],
    ] {
        assert_eq!(mclr(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn effective_config_reflects_env_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mclr"))
        .args([
            "corpus",
            "--out",
            p(&dir.path().join("c.jsonl")),
            "--size",
            "4",
            "--frames",
            FRAMES,
        ])
        .env_clear()
        .env("MCLR_SEED", "9")
        .env("MCLR_CORPUS_SIZE", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .find_map(|l| l.strip_prefix("effective-config "))
        .expect("config line");
    let config: Value = serde_json::from_str(line).unwrap();
    assert_eq!(config["command"], "corpus");
    assert_eq!(config["settings"]["seed"], 9);
    assert_eq!(config["settings"]["corpus_size"], 4);
    assert_eq!(config["settings"]["frames"], 32);
}

#[test]
fn guidance_weight_zero_ignores_the_prompt() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gen = |prompt: &str, name: &str, cfg: &str| {
        let out = dir.path().join(name);
        ok(&[
            "gen",
            "--ckpt",
            p(&f.ckpt),
            "--prompt",
            prompt,
            "--seed",
            "4",
            "--frames",
            FRAMES,
            "--cfg-weight",
            cfg,
            "--out",
            p(&out),
        ]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(
        gen("a man jumps.", "a0.json", "0"),
        gen("a person waves.", "b0.json", "0")
    );
    assert_ne!(
        gen("a man jumps.", "a1.json", "2.5"),
        gen("a person waves.", "b1.json", "2.5")
    );
}

#[test]
fn edit_writes_reports_and_noop_diff_is_zero() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let edit = |directive: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let summary = ok(&[
            "edit",
            "--ckpt",
            p(&f.ckpt),
            "--base-prompt",
            "a man jumps.",
            "--seed",
            "2",
            "--frames",
            FRAMES,
            "--directive",
            directive,
            "--out-dir",
            p(&out_dir),
        ]);
        (summary, out_dir)
    };
    let (noop, out_dir) = edit(r#"{"op":"emphasize","word_index":2,"weight":0.0}"#, "noop");
    assert_eq!(noop["zero_diff"], true);
    assert_eq!(
        std::fs::read(out_dir.join("reference.json")).unwrap(),
        std::fs::read(out_dir.join("edited.json")).unwrap()
    );
    let diff = read_json(&out_dir.join("diff.json"));
    assert!(diff["frame_deltas"].as_array().unwrap().iter().all(|d| d == 0.0));
    assert_eq!(diff["frame_deltas"].as_array().unwrap().len(), 32);

    let (up, _) = edit(r#"{"op":"emphasize","word_index":2,"weight":0.4}"#, "up");
    assert_eq!(up["zero_diff"], false);
    let deltas = up["column_mass_deltas"].as_array().unwrap();
    assert_eq!(deltas.len(), 4);
    assert!(deltas[3].as_f64().unwrap() > 0.0, "{deltas:?}");

    let file = dir.path().join("directive.json");
    std::fs::write(&file, r#"{"op":"example","chunk_size":8,"samples":3}"#).unwrap();
    let (_, out_dir) = edit(&format!("@{}", p(&file)), "example");
    assert!(out_dir.join("variant_02.json").exists() && out_dir.join("variant_03.json").exists());
}

#[test]
fn count_reads_attention_dumps_and_motions() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let attn = dir.path().join("attn");
    let motion = dir.path().join("motion.json");
    let gen = ok(&[
        "gen",
        "--ckpt",
        p(&f.ckpt),
        "--prompt",
        "a man jumps twice.",
        "--frames",
        FRAMES,
        "--out",
        p(&motion),
        "--dump-attn",
        p(&attn),
    ]);
    assert_eq!(gen["attention_files"], 120);

    let from_attn = ok(&["count", "--attn", p(&attn.join("self_l01_s09.mclr"))]);
    assert_eq!(from_attn["source"], "attention");
    assert_eq!(from_attn["per_row_peaks"].as_array().unwrap().len(), 32 / 4);
    assert!(from_attn["count"].as_f64().unwrap() >= 0.0);

    let report = dir.path().join("count.json");
    ok_silent(&["count", "--motion", p(&motion), "--sigma", "1.0", "--out", p(&report)]);
    let counted = read_json(&report);
    assert_eq!(counted["source"], "trajectory");
    assert_eq!(counted["config"]["sigma"], 1.0);
    assert_eq!(
        counted["count"].as_f64().unwrap() as usize,
        counted["peaks"].as_array().unwrap().len()
    );

    std::fs::write(dir.path().join("bad.mclr"), b"nope").unwrap();
    assert_eq!(
        mclr(&["count", "--attn", p(&dir.path().join("bad.mclr"))])
            .status
            .code(),
        Some(3)
    );
}

fn ok_silent(args: &[&str]) {
    let out = mclr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty());
}
