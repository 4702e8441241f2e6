use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_instructasr"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "paths": {
            "corpus": dir.join("corpus"),
            "vocab": dir.join("vocab.txt"),
            "checkpoint": dir.join("model.ckpt"),
            "out": dir.join("out"),
        },
        "corpus": {"train": 16, "dev": 4, "test": 2, "min_words": 3, "max_words": 5},
        "vocab_size": 96,
        "model": {"hidden_dim": 16, "attn_heads": 2, "ffn_dim": 24, "enc_layers": 1, "dec_layers": 1},
        "train": {"steps": 6, "batch_size": 4, "eval_every": 3,
                  "schedule": {"warmup_steps": 2, "peak": 0.002, "decay_steps": 4, "final_fraction": 0.5}},
        "probe": {"dev_utterances": 2, "skill_utterances": 1},
        "decode": {"beam": 2, "max_len": 12},
        "suite": {"seen_per_skill": 1, "unseen_per_skill": 1},
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--config").arg(config).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn sha_line(out: &Output) -> String {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    text.split_whitespace().skip_while(|w| *w != "sha256").nth(1).expect("hash printed").to_owned()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    run(&cfg, &["synth"]);
    run(&cfg, &["vocab"]);
    run(&cfg, &["build-data", "--epoch", "1"]);
    run(&cfg, &["train"]);
    run(&cfg, &["decode", "--split", "dev"]);
    let eval = run(&cfg, &["eval"]);
    let out = dir.path().join("out");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["utterances"], 2);
    assert_eq!(report["confusion"].as_array().unwrap().len(), 5);
    let pairs = std::fs::read_to_string(out.join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 2 * 10);
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(std::fs::read_to_string(out.join("decode.jsonl")).unwrap().lines().count(), 4);
    assert_eq!(std::fs::read_to_string(out.join("samples-1.jsonl")).unwrap().lines().count(), 16);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("confusion"));
    assert!(out.join("config.json").exists());
}

#[test]
fn seeded_training_is_reproducible() {
    let hashes: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = tiny_config(dir.path());
            run(&cfg, &["--seed", "7", "synth"]);
            run(&cfg, &["--seed", "7", "vocab"]);
            sha_line(&run(&cfg, &["--seed", "7", "train"]))
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn shell_reads_instructions_from_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for step in ["synth", "vocab", "train"] {
        run(&cfg, &[step]);
    }
    let mut child = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["shell", "--split", "test"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"Please transcribe the speech\n\nIgnore the audio in this clip.\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.contains('[') && l.ends_with(']')));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().current_dir(dir.path()).args(args).output().unwrap().status.code();
    assert_eq!(code(&["no-such-command"]), Some(2));
    assert_eq!(code(&["--beam", "0", "synth"]), Some(2));
    assert_eq!(code(&["--config", "missing.json", "synth"]), Some(2));
    assert_eq!(code(&["--out", "o", "train"]), Some(2));
    assert_eq!(code(&["--delta", "3", "--out", "o", "synth"]), Some(2));
    std::fs::write(dir.path().join("bad.json"), "{\"train\": {\"steps\": -1}}").unwrap();
    assert_eq!(code(&["--config", "bad.json", "synth"]), Some(2));
}
