//! The whole pipeline from a TOML config: compose, self-distill, training
//! records and evaluation, all with scripted policies and a stub executor.

use std::fs;

use strategy_distill::config::PipelineConfig;
use strategy_distill::pipeline::{Pipeline, ENTRIES_FILE, OUTCOMES_FILE};

const CONFIG: &str = r#"
seed = 42
parallelism = 2
K = 4

[policies.agentic]
role = "agentic"
kind = "scripted"
[policies.agentic.responses]
sq = "<code>print(17**2)</code><executor>289\n</executor><answer>289</answer>"
sum = "<code>print(sum(range(1, 101)))</code><executor>5050\n</executor><answer>5050</answer>"
odd = "<code>print(3*5)</code><executor>15\n</executor><answer>15</answer>"

[policies.reasoning]
role = "reasoning"
kind = "scripted"
[policies.reasoning.responses]
sq = "<think>17*17 = 289</think><answer>289</answer>"
sum = "<think>Pairs sum to 101, fifty pairs.</think><answer>5000</answer>"
odd = "<think>The product is 15.</think><answer>15</answer>"

[policies.student]
role = "student"
kind = "scripted"
[policies.student.responses]
sq = ["<answer>289</answer>", "<answer>279</answer>", "<answer>289</answer>", "<answer>289</answer>"]
sum = ["<code>print(sum(range(1, 101)))</code><answer>5050</answer>"]
odd = ["<answer>13</answer>"]

[executor]
kind = "stub"
[executor.table."print(sum(range(1, 101)))"]
stdout = "5050\n"
stderr = ""
exit_status = 0
timed_out = false
duration_ms = 4
"#;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let problems = dir.path().join("problems.jsonl");
    fs::write(
        &problems,
        concat!(
            r#"{"id": "sq", "statement": "Compute 17^2.", "answer": "289"}"#, "\n",
            r#"{"id": "sum", "statement": "Sum 1..100.", "answer": "5050"}"#, "\n",
            r#"{"id": "odd", "statement": "Multiply 3 by 5.", "answer": "15"}"#, "\n",
        ),
    )?;
    let config = PipelineConfig::from_toml(CONFIG, dir.path())?;
    let out = dir.path().join("run");
    let pipeline = Pipeline::new(config, &out)?;

    let manifests = [
        pipeline.compose(&problems)?,
        pipeline.selfdistill(&problems)?,
        pipeline.trainprep(Some(&out.join(OUTCOMES_FILE)), Some(&out.join(ENTRIES_FILE)))?,
        pipeline.eval(&problems)?,
    ];
    for m in &manifests {
        println!("{:<12} {}", m.command, serde_json::to_string(&m.counts)?);
    }
    print!("{}", fs::read_to_string(out.join("eval.csv"))?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
