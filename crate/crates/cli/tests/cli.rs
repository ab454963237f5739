//! CLI smoke tests: exit codes and the end-to-end verb flow on a small
//! fixture experiment.

use std::io::Write;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptveil"))
}

fn write_fixture(dir: &Path) -> std::path::PathBuf {
    std::fs::write(
        dir.join("model.json"),
        r#"{"vocab_size":256,"embed_dim":12,"n_layers":2,"max_context":512,"seed":7}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("spec.json"),
        r#"{"task":"Answer questions.","style":"Be extremely formal.","scenario":"full"}"#,
    )
    .unwrap();
    let mut f = std::fs::File::create(dir.join("corpus.jsonl")).unwrap();
    for i in 0..10 {
        writeln!(f, r#"{{"question":"cli fixture question {i}?"}}"#).unwrap();
    }
    let config = serde_json::json!({
        "model": {"backend_id": "tiny", "model_path": dir.join("model.json")},
        "prompt_spec": dir.join("spec.json"),
        "corpus": {
            "path": dir.join("corpus.jsonl"),
            "input_field": "question",
            "train_n": 5,
            "test_n": 2,
            "split_seed": 3
        },
        "obfuscation": {
            "method": "soft",
            "iterations": 2,
            "output_budget": 3,
            "window": 3,
            "init_len": 4,
            "seed": 1
        },
        "evaluation": {
            "top_p": 0.95,
            "temperature": 0.7,
            "max_new_tokens": 8,
            "seed": 50,
            "greedy": true,
            "k_samples": 1,
            "checkpoint_stride": 2
        },
        "cache_dir": dir.join("cache"),
        "output_dir": dir.join("run")
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn full_verb_flow_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path());

    let targets = bin().args(["targets", "-c"]).arg(&config).output().unwrap();
    assert!(targets.status.success(), "targets failed: {targets:?}");

    let obfuscate = bin()
        .args(["obfuscate", "-c"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        obfuscate.status.success(),
        "obfuscate failed: {obfuscate:?}"
    );
    assert!(dir.path().join("run/obf_prompt.sobf").exists());

    let evaluate = bin()
        .args(["evaluate", "-c"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(evaluate.status.success(), "evaluate failed: {evaluate:?}");
    let stdout = String::from_utf8_lossy(&evaluate.stdout);
    assert!(stdout.contains("bleu"));

    let report = bin()
        .args(["report", "--run-dir"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("output similarity"));
}

#[test]
fn missing_config_file_is_exit_code_two() {
    let out = bin()
        .args(["obfuscate", "-c", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_contents_are_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, b"{\"not\": \"an experiment config\"}").unwrap();
    let out = bin().args(["obfuscate", "-c"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_attack_is_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path());
    let out = bin()
        .args(["attack", "--attack", "bogus", "-c"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
