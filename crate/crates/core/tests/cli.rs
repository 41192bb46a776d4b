use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = "\
data.n_train = 40
data.n_dev = 4
data.n_test = 6
train.max_steps = 5
train.warmup = 2
beam.max_unit_len = 20
model.d_model = 16
";

fn unity(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unity"))
        .current_dir(dir)
        .args(["--config", "tiny.cfg", "--out", "run"])
        .args(args)
        .output()
        .unwrap()
}

fn check_manifest(run: &Path, cmd: &str) -> Vec<String> {
    let text = fs::read_to_string(run.join(format!("{cmd}.manifest"))).unwrap();
    let mut names = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(parts.len(), 3, "{line}");
        let bytes = fs::read(run.join(parts[2])).unwrap();
        assert_eq!(parts[1].parse::<usize>().unwrap(), bytes.len());
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(parts[0], hex);
        names.push(parts[2].to_string());
    }
    names
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let run = dir.path().join("run");

    for cmd in ["gen-data", "train", "decode", "eval"] {
        let out = unity(dir.path(), &[cmd, "--seed", "4"]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let names = check_manifest(&run, "gen-data");
    for f in ["train.tsv", "dev.tsv", "test.tsv", "corpus.txt"] {
        assert!(names.iter().any(|n| n == f), "{f}");
    }
    assert!(check_manifest(&run, "train").contains(&"model.ckpt".to_string()));
    check_manifest(&run, "decode");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("dataset,model,pass,metric,value"));

    let cfg = fs::read_to_string(run.join("train.resolved.cfg")).unwrap();
    assert!(cfg.contains("task.seed = 4"));
    assert!(cfg.contains("train.seed = 4"));
    assert!(cfg.contains("model.d_model = 16"));

    let over = unity(dir.path(), &["gen-data", "--override", "data.n_test=3"]);
    assert!(over.status.success());
    assert_eq!(unity_core::data::read_dataset(&run.join("test.tsv")).unwrap().len(), 3);
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    for args in [
        &["gen-data", "--override", "train.bogus=1"][..],
        &["gen-data", "--override", "train.lr=abc"],
        &["no-such-command"],
    ] {
        let out = unity(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    fs::write(dir.path().join("tiny.cfg"), "model.arch = nonsense\n").unwrap();
    assert_eq!(unity(dir.path(), &["gen-data"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = unity(dir.path(), &["decode"]);
    assert_eq!(out.status.code(), Some(2));
}
