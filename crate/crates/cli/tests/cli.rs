use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[corpus.synth]
conversations = 5
passages = 80
[train]
epochs = 2
[correction]
beam_width = 3
max_steps = 4
"#;

fn convinv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convinv"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn usage_errors_exit_one() {
    let dir = setup();
    let out = convinv(dir.path(), &["experiment", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = convinv(dir.path(), &["--config", "missing.toml", "experiment"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    std::fs::write(dir.path().join("bad.toml"), "nonsense_key = 1\n").unwrap();
    assert_eq!(convinv(dir.path(), &["--config", "bad.toml", "index", "--out", "i"]).status.code(), Some(1));

    assert_eq!(convinv(dir.path(), &["retrieve", "--out", "r", "--arm", "nearest"]).status.code(), Some(1));
    assert_eq!(convinv(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.trec"), "q1 Q0 d1 1\n").unwrap();
    std::fs::write(dir.path().join("q.txt"), "q1 0 d1 1\n").unwrap();
    let out = convinv(dir.path(), &["eval", "--run", "bad.trec", "--qrels", "q.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.trec:1"));

    let out = convinv(dir.path(), &["eval", "--run", "absent.trec", "--qrels", "q.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_writes_report_and_repeats_exactly() {
    let dir = setup();
    let args = ["--config", "c.toml", "experiment", "--arms", "session_oracle"];
    let first = convinv(dir.path(), &args);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(stdout.contains("session_oracle"));
    let out = dir.path().join("out");
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    let run = std::fs::read(out.join("runs/session_oracle.trec")).unwrap();
    assert_eq!(std::fs::read_to_string(out.join("report.txt")).unwrap(), stdout);

    let second = convinv(dir.path(), &args);
    assert_eq!(second.stdout, first.stdout);
    assert_eq!(std::fs::read(out.join("runs/session_oracle.trec")).unwrap(), run);
    let strip = |s: &str| {
        let mut v: serde_json::Value = serde_json::from_str(s).unwrap();
        v.as_object_mut().unwrap().remove("meta");
        v
    };
    let json2 = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(strip(&json), strip(&json2));

    let rendered = convinv(dir.path(), &["report", "--input", "out/report.json"]);
    assert_eq!(rendered.stdout, first.stdout);
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = setup();
    assert!(convinv(dir.path(), &["synth", "--out", "a", "--conversations", "3", "--passages", "20"]).status.success());
    assert!(convinv(dir.path(), &["--seed", "9", "synth", "--out", "b", "--conversations", "3", "--passages", "20"]).status.success());
    let a = std::fs::read(dir.path().join("a/conversations.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/conversations.jsonl")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn shipped_config_spells_out_the_defaults() {
    use convinv::harness::{Arm, ExperimentConfig};
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let defaults = ExperimentConfig::default();
    assert_eq!(cfg.arms, Arm::ALL.to_vec());
    assert_eq!(cfg.embedder, defaults.embedder);
    assert_eq!(cfg.train, defaults.train);
    assert_eq!(cfg.correction, defaults.correction);
    assert_eq!(cfg.retrieval, defaults.retrieval);
    assert_eq!(cfg.rewrite, defaults.rewrite);
    let synth = cfg.corpus.synth.unwrap();
    assert_eq!((synth.conversations, synth.passages), (200, 2000));
}
