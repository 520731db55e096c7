//! Sample K student rollouts, grade them and build verification/correction
//! entries from a reasoning teacher.

use strategy_distill::policy::{ConnectOptions, PolicyHandle, PolicyRole, ScriptedResponses};
use strategy_distill::runtime::ToolLoopConfig;
use strategy_distill::selfdistill::RolloutEngine;
use strategy_distill::{
    build_buffer, sample_and_grade, BufferConfig, Problem, StubExecutor, TransitionCatalog, WhitespaceTagCounter,
};

fn answers(list: &[&str]) -> ScriptedResponses {
    ScriptedResponses::Many(list.iter().map(|a| format!("<think>try</think><answer>{a}</answer>")).collect())
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let problems = [Problem::new("solid", "2+2", "4"), Problem::new("mixed", "3*3", "9"), Problem::new("lost", "7*8", "56")];
    let student = PolicyHandle::scripted(
        "student",
        PolicyRole::Student,
        [
            ("solid".to_string(), answers(&["4", "4", "4", "4"])),
            ("mixed".to_string(), answers(&["6", "9", "9", "8"])),
            ("lost".to_string(), answers(&["54", "58", "15", "0"])),
        ],
    )
    .connect(&ConnectOptions::default())?;
    let teacher = PolicyHandle::scripted(
        "reasoning",
        PolicyRole::Reasoning,
        [("4", "solid"), ("9", "mixed"), ("56", "lost")]
            .map(|(a, id)| (id.to_string(), ScriptedResponses::One(format!("<think>carefully</think><answer>{a}</answer>")))),
    )
    .connect(&ConnectOptions::default())?;

    let catalog = TransitionCatalog::default();
    let executor = StubExecutor::default();
    let tool_loop = ToolLoopConfig::default();
    let engine = RolloutEngine {
        prompt_template: tool_loop.prompt_template.clone(),
        temperature: 0.6,
        max_tokens: tool_loop.total_token_budget,
        tools: Some((&executor, &tool_loop)),
        counter: &WhitespaceTagCounter,
        catalog: &catalog,
    };
    let mut rollouts = Vec::new();
    for p in &problems {
        let r = sample_and_grade(p, student.as_ref(), 4, 11, &engine)?;
        println!("{:<6} grades={:?} mean={}", p.id, r.stats.grades, r.stats.mean_string());
        rollouts.push(r);
    }

    let run = build_buffer(&rollouts, teacher.as_ref(), &BufferConfig::default(), &catalog)?;
    for e in &run.entries {
        println!("{:<6} {:?}: {}", e.problem_id, e.kind, e.composed.serialize()?);
    }
    println!("{:?}", run.stats);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
