use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use strategy_distill::composer::draw_order;
use strategy_distill::pipeline::Manifest;
use strategy_distill::util::derive_seed;

const BIN: &str = env!("CARGO_BIN_EXE_sdistill");

fn sdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn z_for(seed: u64, id: &str, index: usize) -> u8 {
    draw_order(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, id, index as u64)))
}

fn answer(a: &str) -> String {
    format!("<think>work</think><answer>{a}</answer>")
}

/// Config plus problems where problem i lands in case i whatever the order
/// draw: the first teacher's grade is g1 and the second's is g2.
fn four_case_fixture(dir: &Path, seed: u64) {
    let cases = [("cbs", 0, 1), ("both", 1, 1), ("first", 1, 0), ("none", 0, 0)];
    let mut problems = String::new();
    let mut agentic = serde_json::Map::new();
    let mut reasoning = serde_json::Map::new();
    for (i, (id, g1, g2)) in cases.iter().enumerate() {
        problems += &format!("{{\"id\": \"{id}\", \"statement\": \"s\", \"answer\": \"1\"}}\n");
        let (ga, gr) = if z_for(seed, id, i) == 1 { (g1, g2) } else { (g2, g1) };
        agentic.insert(id.to_string(), answer(&ga.to_string()).into());
        reasoning.insert(id.to_string(), answer(&gr.to_string()).into());
    }
    fs::write(dir.join("problems.jsonl"), problems).unwrap();
    fs::write(dir.join("agentic.json"), Value::Object(agentic).to_string()).unwrap();
    fs::write(dir.join("reasoning.json"), Value::Object(reasoning).to_string()).unwrap();
    fs::write(
        dir.join("config.toml"),
        format!(
            r#"
seed = {seed}
K = 2

[policies.agentic]
role = "agentic"
kind = "scripted"
responses_file = "agentic.json"

[policies.reasoning]
role = "reasoning"
kind = "scripted"
responses_file = "reasoning.json"

[policies.student]
role = "student"
kind = "scripted"
responses_file = "agentic.json"
"#
        ),
    )
    .unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn compose_four_cases() {
    let dir = tempfile::tempdir().unwrap();
    four_case_fixture(dir.path(), 5);
    let out = sdistill(dir.path(), &["--config", "config.toml", "compose", "--problems", "problems.jsonl"]);
    ok(&out);
    let stats = read_json(&dir.path().join("out/compose_stats.json"));
    for case in ["CorrectedBySecond", "BothCorrect", "FirstOnly", "Discarded"] {
        assert_eq!(stats[case], 1, "{case} in {stats}");
    }
    let lines = fs::read_to_string(dir.path().join("out/outcomes.jsonl")).unwrap();
    let outcomes: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let ids: Vec<&str> = outcomes.iter().map(|o| o["problem_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["cbs", "both", "first", "none"]);
    assert!(outcomes[3]["composed_text"].is_null());
    let manifest: Manifest = serde_json::from_value(read_json(&dir.path().join("out/compose.manifest.json"))).unwrap();
    assert_eq!(manifest.seed, 5);
    assert!(!manifest.partial);
    assert!(manifest.outputs.contains_key("outcomes.jsonl"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    four_case_fixture(dir.path(), 5);
    let out = sdistill(
        dir.path(),
        &["--config", "config.toml", "--seed", "6", "--out-dir", "other", "compose", "--problems", "problems.jsonl"],
    );
    ok(&out);
    let manifest = read_json(&dir.path().join("other/compose.manifest.json"));
    assert_eq!(manifest["seed"], 6);
}

#[test]
fn empty_input_gives_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    four_case_fixture(dir.path(), 1);
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = sdistill(dir.path(), &["--config", "config.toml", "compose", "--problems", "empty.jsonl"]);
    ok(&out);
    assert_eq!(fs::read_to_string(dir.path().join("out/outcomes.jsonl")).unwrap(), "");
    let stats = read_json(&dir.path().join("out/compose_stats.json"));
    assert!(stats.as_object().unwrap().values().all(|v| v == 0), "{stats}");
}

#[test]
fn undefined_policy_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("config.toml"),
        "[policies.agentic]\nrole = \"agentic\"\nkind = \"scripted\"\n",
    )
    .unwrap();
    fs::write(dir.path().join("problems.jsonl"), "").unwrap();
    let out = sdistill(dir.path(), &["--config", "config.toml", "compose", "--problems", "problems.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("policies.reasoning: undefined"));

    fs::write(dir.path().join("bad.toml"), "K = 0\n").unwrap();
    let out = sdistill(dir.path(), &["--config", "bad.toml", "grade", "--pairs", "problems.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k: must be >= 1"));
}

#[test]
fn eval_writes_both_budgets() {
    let dir = tempfile::tempdir().unwrap();
    four_case_fixture(dir.path(), 2);
    let out = sdistill(dir.path(), &["--config", "config.toml", "eval", "--problems", "problems.jsonl"]);
    ok(&out);
    let csv = fs::read_to_string(dir.path().join("out/eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "budget,accuracy,n,tool_rate");
    assert!(rows[1].starts_with("4096,"));
    assert!(rows[2].starts_with("32768,"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn grade_reports_per_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pairs.jsonl"),
        concat!(
            r#"{"id": "a", "output": "<answer>\\frac{1}{2}</answer>", "gold": "0.5"}"#, "\n",
            r#"{"output": "so the answer is 7", "gold": "8"}"#, "\n",
        ),
    )
    .unwrap();
    ok(&sdistill(dir.path(), &["grade", "--pairs", "pairs.jsonl"]));
    let lines = fs::read_to_string(dir.path().join("out/grades.jsonl")).unwrap();
    let reports: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports[0]["id"], "a");
    assert_eq!(reports[0]["grade"], 1);
    assert_eq!(reports[1]["grade"], 0);
}

#[test]
fn two_runs_have_identical_manifests_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    four_case_fixture(dir.path(), 9);
    for run in ["a", "b"] {
        for stage in [
            vec!["compose", "--problems", "problems.jsonl"],
            vec!["selfdistill", "--problems", "problems.jsonl"],
            vec!["trainprep"],
            vec!["eval", "--problems", "problems.jsonl"],
        ] {
            let mut args = vec!["--config", "config.toml", "--out-dir", run, "--parallelism", "3"];
            args.extend(stage);
            ok(&sdistill(dir.path(), &args));
        }
    }
    let mut names: Vec<String> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.contains(&"train.jsonl".to_string()));
    for name in &names {
        let (a, b) = (dir.path().join("a").join(name), dir.path().join("b").join(name));
        if name.ends_with(".manifest.json") {
            let ma: Manifest = serde_json::from_value(read_json(&a)).unwrap();
            let mb: Manifest = serde_json::from_value(read_json(&b)).unwrap();
            assert_eq!(ma.without_timestamp(), mb.without_timestamp(), "{name}");
        } else {
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{name}");
        }
    }

    let out = sdistill(dir.path(), &["--out-dir", "a", "stats"]);
    ok(&out);
    let stats: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["compose"]["counts"]["problems"], 4);
    assert_eq!(stats["trainprep"]["partial"], false);
}
