use std::path::Path;

use convinv::corpus::load_run;
use convinv::harness::{report_tables, run_experiment, write_outputs, Arm, ExperimentConfig, ExperimentReport};
use serde_json::Value;

const SMALL: &str = r#"
[corpus.synth]
conversations = 8
passages = 120
[train_corpus.synth]
conversations = 12
passages = 120
[train]
epochs = 3
[correction]
beam_width = 4
max_steps = 6
"#;

fn small(arms: &[Arm]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.arms = arms.to_vec();
    cfg
}

fn fixture() -> ExperimentReport {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report_fixture.json");
    ExperimentReport::from_json(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn json_numbers(v: &Value, out: &mut Vec<f64>) {
    match v {
        Value::Number(n) => out.push(n.as_f64().unwrap()),
        Value::Array(a) => a.iter().for_each(|x| json_numbers(x, out)),
        Value::Object(o) => o.values().for_each(|x| json_numbers(x, out)),
        _ => {}
    }
}

/// Every numeric token of the table (header row excluded) is some JSON
/// number printed at the token's precision.
fn assert_text_numbers_in_json(text: &str, json: &str) {
    let mut nums = Vec::new();
    json_numbers(&serde_json::from_str(json).unwrap(), &mut nums);
    let mut checked = 0;
    for (i, line) in text.lines().enumerate() {
        if i == 1 {
            continue;
        }
        for raw in line.split_whitespace() {
            let tok = raw.trim_matches(|c| c == '(' || c == ')');
            let tok = tok.rsplit('=').next().unwrap();
            if tok.parse::<f64>().is_err() {
                continue;
            }
            let places = tok.split_once('.').map_or(0, |(_, f)| f.len());
            assert!(
                nums.iter().any(|n| format!("{n:.places$}") == tok),
                "`{tok}` in line {i} has no JSON source"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn golden_render() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report_golden.txt");
    let (text, json) = report_tables(&fixture());
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
    assert_eq!(ExperimentReport::from_json(&json).unwrap(), fixture());
    assert_text_numbers_in_json(&text, &json);
}

#[test]
fn oracle_only_has_zero_deltas() {
    let out = run_experiment(&small(&[Arm::SessionOracle])).unwrap();
    assert_eq!(out.report.arms.len(), 1);
    let a = &out.report.arms[0];
    assert_eq!(a.arm, Arm::SessionOracle);
    assert_eq!((a.delta.mrr, a.delta.ndcg_at_3, a.delta.recall_at_100), (0.0, 0.0, 0.0));
    assert_eq!(a.similarity, 1.0);
    let (text, json) = report_tables(&out.report);
    assert_eq!(text.matches("(0.0000)").count(), 3);
    assert_text_numbers_in_json(&text, &json);
}

#[test]
fn oracle_is_added_when_not_requested() {
    let out = run_experiment(&small(&[Arm::RewriteOnly])).unwrap();
    let arms: Vec<Arm> = out.report.arms.iter().map(|a| a.arm).collect();
    assert_eq!(arms, vec![Arm::SessionOracle, Arm::RewriteOnly]);
}

#[test]
fn runs_are_deterministic_and_files_complete() {
    let cfg = small(&[Arm::Convinv, Arm::RewriteOnly]);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.report.deterministic_json(), b.report.deterministic_json());
    for (x, y) in a.arms.iter().zip(&b.arms) {
        assert_eq!(x.run.to_trec_string(), y.run.to_trec_string());
    }

    let dir = tempfile::tempdir().unwrap();
    write_outputs(&a, dir.path()).unwrap();
    for f in [
        "report.json",
        "report.txt",
        "encoder.cvwt",
        "runs/session_oracle.trec",
        "runs/convinv.trec",
        "runs/rewrite_only.trec",
        "metrics/convinv.json",
        "inversions/convinv.jsonl",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(!dir.path().join("inversions/rewrite_only.jsonl").exists());
    let run = load_run(&dir.path().join("runs/convinv.trec")).unwrap();
    assert_eq!(run.len(), a.report.summary.num_queries);
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_text_numbers_in_json(&text, &json);
}

#[test]
fn adding_an_arm_changes_no_other_arm() {
    let few = run_experiment(&small(&[Arm::RewriteOnly])).unwrap();
    let many = run_experiment(&small(&[Arm::TxInversion, Arm::RewriteOnly, Arm::TxHuman])).unwrap();
    for arm in [Arm::SessionOracle, Arm::RewriteOnly] {
        assert_eq!(few.report.arm(arm), many.report.arm(arm));
    }
}
