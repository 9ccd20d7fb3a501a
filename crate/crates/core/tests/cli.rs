//! The command-line binary: exit codes, reports and determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structkd")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, task: &str, n: &str) {
    let o = bin(&["synth", "--task", task, "--sentences", n, "--max-len", "8", "--hash-bits", "14", "--seed", "5", "--out-dir", p(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_chain_exits_zero() {
    let o = bin(&["verify", "--suite", "chain"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
}

#[test]
fn verify_all_json_reports_every_check() {
    let o = bin(&["verify", "--instances", "10", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert!(checks.iter().any(|c| c["name"] == "grad.pipeline.case-2b"));
}

#[test]
fn unknown_flag_and_missing_file_exit_two() {
    assert_eq!(bin(&["verify", "--nope"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["eval", "--model", "/no/such/model", "--test", "/no/such/file"]).status.code(), Some(2));
    assert_eq!(bin(&["verify", "--suite", "trees"]).status.code(), Some(2));
}

#[test]
fn distilling_case_1a_from_a_maxent_teacher_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "chain", "50");
    let (train, m) = (d.path().join("train.conll"), d.path().join("maxent.json"));
    let o = bin(&["train-teacher", "--task", "ner-maxent", "--train", p(&train), "--out", p(&m), "--epochs", "1"]);
    assert!(o.status.success());
    let o = bin(&["distill", "--case", "1a", "--teacher", p(&m), "--train", p(&train), "--out", p(&d.path().join("s.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ner-crf"));
}

#[test]
fn eval_on_pseudo_labels_of_the_same_model_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "chain", "60");
    let planted = d.path().join("planted.model.json");
    let gold = d.path().join("gold.conll");
    let o = bin(&["pseudo-label", "--teacher", p(&planted), "--in", p(&d.path().join("test.conll")), "--out", p(&gold)]);
    assert!(o.status.success());
    let o = bin(&["eval", "--model", p(&planted), "--test", p(&gold)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("F1 = 100.00"));
}

#[test]
fn dependency_eval_prints_attachment_scores() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "heads", "60");
    let planted = d.path().join("planted.model.json");
    let gold = d.path().join("gold.conllu");
    assert!(bin(&["pseudo-label", "--teacher", p(&planted), "--in", p(&d.path().join("dev.conllu")), "--out", p(&gold)]).status.success());
    let out = String::from_utf8(bin(&["eval", "--model", p(&planted), "--test", p(&gold)]).stdout).unwrap();
    assert!(out.contains("UAS = 100.00") && out.contains("LAS = 100.00"), "{out}");
}

#[test]
fn same_flags_give_identical_artifacts() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "chain", "80");
    let f = |name: &str| d.path().join(name);
    let teacher = f("planted.model.json");
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = f(&format!("s{k}.json"));
        let o = bin(&[
            "distill", "--case", "2a", "--teacher", p(&teacher), "--train", p(&f("train.conll")), "--dev", p(&f("dev.conll")),
            "--unlabeled", p(&f("test.conll")), "--temperature", "2", "--temp-mode", "local", "--anneal-rate", "1",
            "--seed", "7", "--epochs", "2", "--out", p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push([
            std::fs::read(&out).unwrap(),
            std::fs::read(f(&format!("s{k}.json.manifest.json"))).unwrap(),
            std::fs::read(f(&format!("s{k}.json.history.csv"))).unwrap(),
        ]);
    }
    assert_eq!(runs[0], runs[1]);
    let m: serde_json::Value = serde_json::from_slice(&runs[0][1]).unwrap();
    assert_eq!(m["pseudo_labeled_sentences"], 16);
    assert_eq!(m["deterministic"], true);
}

#[test]
fn every_case_runs_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let chain = d.path().join("chain");
    let heads = d.path().join("heads");
    synth(&chain, "chain", "40");
    synth(&heads, "heads", "40");
    let teachers = [
        ("1a", "ner-crf", &chain, "conll"),
        ("2a", "ner-crf", &chain, "conll"),
        ("3", "ner-maxent", &chain, "conll"),
        ("4", "ner-span", &chain, "conll"),
        ("1b", "dep-1st", &heads, "conllu"),
        ("2b", "dep-2nd", &heads, "conllu"),
    ];
    for (case, family, dir, ext) in teachers {
        let train = dir.join(format!("train.{ext}"));
        let dev = dir.join(format!("dev.{ext}"));
        let t = dir.join(format!("{family}.json"));
        let o = bin(&["train-teacher", "--task", family, "--train", p(&train), "--dev", p(&dev), "--out", p(&t), "--epochs", "2"]);
        assert!(o.status.success(), "{family}: {}", String::from_utf8_lossy(&o.stderr));
        let s = dir.join(format!("student-{case}.json"));
        let o = bin(&["distill", "--case", case, "--teacher", p(&t), "--train", p(&train), "--dev", p(&dev), "--epochs", "2", "--json", "--out", p(&s)]);
        assert!(o.status.success(), "case {case}: {}", String::from_utf8_lossy(&o.stderr));
        let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(m["case"], case);
        let o = bin(&["eval", "--model", p(&s), "--test", p(&dir.join(format!("test.{ext}"))), "--json"]);
        assert!(o.status.success());
    }
}

#[test]
fn config_file_sets_defaults_and_rejects_unknown_keys() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "chain", "40");
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "family = \"ner-maxent\"\nepochs = 1\n").unwrap();
    let out = d.path().join("m.json");
    let o = bin(&["train-student", "--config", p(&cfg), "--train", p(&d.path().join("train.conll")), "--out", p(&out), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["family"], "ner-maxent");
    assert_eq!(m["history"].as_array().unwrap().len(), 1);
    std::fs::write(&cfg, "epoks = 1\n").unwrap();
    let o = bin(&["train-student", "--config", p(&cfg), "--task", "ner-crf", "--train", p(&d.path().join("train.conll")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn iob2_input_is_read_as_bioes() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("iob.conll");
    std::fs::write(&f, "Ana B-PER\nLee I-PER\nmet O\nBo B-PER\n\nRome B-LOC\nis O\n\n").unwrap();
    let m = d.path().join("m.json");
    let o = bin(&["train-teacher", "--task", "ner-crf", "--train", p(&f), "--dev", p(&f), "--out", p(&m), "--epochs", "20", "--lr", "0.5", "--batch-size", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(bin(&["eval", "--model", p(&m), "--test", p(&f)]).stdout).unwrap();
    assert!(out.contains("F1 = 100.00"), "{out}");
}
