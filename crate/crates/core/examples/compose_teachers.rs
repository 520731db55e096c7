//! Compose agentic and reasoning teacher attempts with scripted policies.
//! Which teacher goes first is drawn per problem, so the case a problem lands
//! in depends on the seed.

use std::collections::BTreeMap;

use strategy_distill::policy::{ConnectOptions, PolicyHandle, PolicyRole, ScriptedResponses};
use strategy_distill::{compose_dataset, ComposeConfig, Problem, TransitionCatalog};

fn scripted(role: PolicyRole, answers: &[(&str, &str)]) -> PolicyHandle {
    let responses: BTreeMap<String, ScriptedResponses> = answers
        .iter()
        .map(|(id, ans)| (id.to_string(), ScriptedResponses::from(format!("<think>work</think><answer>{ans}</answer>").as_str())))
        .collect();
    PolicyHandle::scripted(format!("{role:?}").to_lowercase(), role, responses)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let problems: Vec<Problem> = ["a", "b", "c", "d"].iter().map(|id| Problem::new(*id, "x", "1")).collect();
    let agentic = scripted(PolicyRole::Agentic, &[("a", "1"), ("b", "1"), ("c", "1"), ("d", "0")]);
    let reasoning = scripted(PolicyRole::Reasoning, &[("a", "0"), ("b", "1"), ("c", "0"), ("d", "0")]);
    let options = ConnectOptions::default();
    let (agentic, reasoning) = (agentic.connect(&options)?, reasoning.connect(&options)?);

    let cfg = ComposeConfig { seed: 3, ..ComposeConfig::default() };
    let run = compose_dataset(&problems, agentic.as_ref(), reasoning.as_ref(), &cfg, &TransitionCatalog::default());
    for o in &run.outcomes {
        println!("{} z={} g1={} g2={} {:?} L0={:?}", o.problem_id, o.z, o.g1, o.g2, o.case, o.l0);
        if let Some(t) = &o.composed {
            println!("    {}", t.serialize()?);
        }
    }
    println!("{:?}", run.stats);
    assert_eq!(run.stats.total(), problems.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
