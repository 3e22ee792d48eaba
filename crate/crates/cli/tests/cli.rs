//! End-to-end checks of the fedtext binary: artifact layout, exit codes,
//! and the predict subcommand.

use std::path::Path;
use std::process::Command;

fn fedtext() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedtext"))
}

fn write_config(dir: &Path, cell: &str, rounds: usize) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(
        &path,
        format!(
            r#"
mode = "federated"
seed = 5
output_dir = "{out}"

[data]
train = "{d}/train.csv"
test = "{d}/test.csv"
embeddings = "{d}/embeddings.txt"
tokenizer_corpus = "{d}/train.csv"
vocab_max_size = 500

[model]
cell = "{cell}"
recurrent_units = 16
dense_units = 16
max_seq_len = 16
dropout_rate = 0.1

[federation]
rounds = {rounds}
clients = 3
learning_rate = 0.01
batch_size = 16
"#,
            out = dir.join("out").display(),
            d = dir.display(),
        ),
    )
    .unwrap();
    path
}

fn synth(dir: &Path) {
    let status = fedtext()
        .args(["synth", "--per-class", "45", "--vocab-size", "90", "--seed", "2", "--out"])
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn run_writes_artifacts_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "gru", 3);

    let output = fedtext().arg("run").arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("round ")).count(),
        3,
        "per-round summary lines:\n{stdout}"
    );
    for name in ["rounds.jsonl", "metrics.csv", "ledger.csv", "profile.csv", "final_model.bin"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }

    let output = fedtext()
        .args(["predict", "--text", "m000 m004 f001"])
        .arg("--model")
        .arg(dir.path().join("out/final_model.bin"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("class "), "{stdout}");
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "gru", 2);
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&config, text.replace("learning_rate = 0.01", "learning_rate = -1.0")).unwrap();

    let output = fedtext().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("learning_rate"), "{stderr}");
}

#[test]
fn unknown_config_keys_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "rnn", 2);
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&config, format!("{text}\n[surprise]\nkey = 1\n")).unwrap();

    let output = fedtext().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("surprise"), "{stderr}");
}

#[test]
fn runtime_failures_exit_one_with_phase() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "rnn", 1);
    // a socket backend with nothing listening fails inside the round
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(
        &config,
        format!("{text}\n[transport]\nbackend = \"socket\"\naddress = \"127.0.0.1:1\"\n"),
    )
    .unwrap();

    let output = fedtext().arg("run").arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("round 1"), "{stderr}");
    assert!(stderr.contains("broadcast"), "{stderr}");
}

#[test]
fn ablate_tokenizer_writes_paired_series() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = write_config(dir.path(), "gru", 2);

    let output = fedtext().arg("ablate-tokenizer").arg(&config).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let ablation = std::fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 3, "{ablation}"); // header + 2 rounds
    assert!(dir.path().join("out/common/rounds.jsonl").exists());
    assert!(dir.path().join("out/per_client/rounds.jsonl").exists());
}
