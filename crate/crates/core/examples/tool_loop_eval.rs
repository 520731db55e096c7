//! Run the tool-call loop against a stub executor and score a small benchmark
//! at two token budgets.

use std::time::Duration;

use strategy_distill::policy::{ConnectOptions, PolicyHandle, PolicyRole, ScriptedResponses};
use strategy_distill::runtime::{EvalSetup, ExecResult};
use strategy_distill::{
    evaluate, run_agent, Problem, StubExecutor, ToolLoopConfig, TransitionCatalog, WhitespaceTagCounter,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let executor = StubExecutor::default()
        .with("print(3**5)", ExecResult::ok("243\n"))
        .with("import time; time.sleep(5)", ExecResult { duration_ms: 5000, ..ExecResult::ok("") });
    let responses = [
        ("pow", "<think>Use the interpreter.</think><code>print(3**5)</code><answer>243</answer>"),
        ("slow", "<code>import time; time.sleep(5)</code><think>Timed out; 2+2 is 4.</think><answer>4</answer>"),
        ("text", "<think>Plain reasoning: 10/4 = 2.5</think><answer>2.5</answer>"),
    ];
    let policy = PolicyHandle::scripted(
        "student",
        PolicyRole::Student,
        responses.map(|(id, r)| (id.to_string(), ScriptedResponses::from(r))),
    )
    .connect(&ConnectOptions::default())?;
    let problems = [Problem::new("pow", "3^5?", "243"), Problem::new("slow", "2+2?", "4"), Problem::new("text", "10/4?", "5/2")];
    let catalog = TransitionCatalog::default();
    let cfg = ToolLoopConfig {
        exec_timeout: Duration::from_secs(3),
        ..ToolLoopConfig::default()
    };

    let trace = run_agent(&problems[1], policy.as_ref(), &executor, &cfg, &WhitespaceTagCounter, &catalog, None)?;
    println!("{:?} after {} call(s): {}", trace.terminated_by, trace.tool_calls_used, trace.text);

    let setup = EvalSetup {
        policy: policy.as_ref(),
        executor: &executor,
        tool_loop: &cfg,
        counter: &WhitespaceTagCounter,
        catalog: &catalog,
        parallelism: 2,
        seed: Some(0),
    };
    let report = evaluate(&problems, &setup, &[8, 4096])?;
    report.write_csv(std::io::stdout())?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
