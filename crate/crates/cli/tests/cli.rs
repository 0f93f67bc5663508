use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: [&str; 12] = [
    "--set",
    "data.synthetic.docs_per_concept=60",
    "--set",
    "encoder.dim=16",
    "--set",
    "schedule.epochs_concept=1",
    "--set",
    "schedule.epochs_extractor=1",
    "--set",
    "schedule.epochs_debias=1",
    "--set",
    "schedule.epochs_task=1",
];

fn cure(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cure"))
        .args(args)
        .env_remove("CURE_ANNOTATOR_TOKEN")
        .output()
        .expect("spawn cure")
}

fn ok(args: &[&str]) -> Output {
    let out = cure(args);
    assert!(
        out.status.success(),
        "cure {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&TINY);
    v
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic_and_validates_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["generate", "--set", "docs_per_concept=40", "--seed", "3", "--out", s(d)]);
    }
    for f in ["corpus.jsonl", "generator.json", "split.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(json(&a.join("manifest.json"))["status"], "finished");

    let bad = cure(&["generate", "--set", "bias_strength=1.2", "--out", s(&dir.path().join("c"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bias_strength"));
}

#[test]
fn labeling_agrees_with_the_generator_and_replays_from_the_audit_log() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    ok(&["generate", "--set", "docs_per_concept=30", "--out", s(&gen)]);
    let input = gen.join("corpus.jsonl");
    let out = dir.path().join("lab");
    ok(&["label", "--input", s(&input), "--out", s(&out)]);
    let rep = json(&out.join("label_report.json"));
    assert_eq!(rep["agreement"], 1.0);
    assert!(rep["client_calls"].as_u64().unwrap() > 0);
    let first = std::fs::read(out.join("labeled.jsonl")).unwrap();

    ok(&["label", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(json(&out.join("label_report.json"))["client_calls"], 0);
    assert_eq!(std::fs::read(out.join("labeled.jsonl")).unwrap(), first);

    let live = cure(&["label", "--input", s(&input), "--backend", "live", "--out", s(&dir.path().join("x"))]);
    assert_eq!(live.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&live.stderr).contains("CURE_ANNOTATOR_TOKEN"));
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&with_tiny(&["train", "--out", s(&run)]));
    assert_eq!(std::fs::read_dir(run.join("checkpoints")).unwrap().count(), 4);
    let metrics = json(&run.join("metrics.json"));
    assert!(metrics["iid"]["accuracy"].is_number() && metrics["ood"]["accuracy"].is_number());
    assert!(run.join("report.json").exists());
    assert!(std::fs::read_dir(run.join("curves")).unwrap().count() > 0);

    ok(&["eval", "--run", s(&run)]);
    let eval = json(&run.join("eval.json"));
    assert_eq!(eval["iid"], metrics["iid"]);
    assert_eq!(eval["ood"], metrics["ood"]);
}

#[test]
fn baseline_run_has_only_the_task_head() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&with_tiny(&["train", "--mode", "off", "--out", s(&run)]));
    let names: Vec<String> = std::fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 1);
    assert!(names[0].starts_with("04"), "{names:?}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&with_tiny(&["train", "--out", s(&a)]));
    let stopped = cure(&with_tiny(&["train", "--stop-after", "2", "--out", s(&b)]));
    assert!(!stopped.status.success());
    ok(&with_tiny(&["train", "--resume", "--out", s(&b)]));
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(b.join("metrics.json")).unwrap()
    );
}

#[test]
fn sweep_covers_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&with_tiny(&["sweep", "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 * 5);
    assert!(out.join("sweep_summary.json").exists());
}

#[test]
fn ablation_pairs_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    ok(&with_tiny(&["ablate", "--seeds", "1,2", "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.contains("with_reversal") && csv.contains("without_reversal"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    ok(&["grad-check", "--seeds", "2", "--out", s(&out)]);
    assert!(out.exists());
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(cure(&["train"]).status.code(), Some(1));
    assert_eq!(cure(&["bogus"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = cure(&["train", "--set", "cure.margin=2", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = cure(&["sweep", "--seeds", "x", "--out", s(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(cure(&["--help"]).status.success());
}

#[test]
fn missing_run_directory_is_a_checkpoint_or_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = cure(&["eval", "--run", s(&dir.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(2));
}
