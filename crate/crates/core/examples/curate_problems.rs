//! Split problems into agentic-favored and reasoning-favored subsets, then
//! downsample the larger subset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strategy_distill::curator::balance;
use strategy_distill::policy::{ConnectOptions, PolicyHandle, PolicyRole, ScriptedResponses};
use strategy_distill::{curate, CurateConfig, Problem};

fn answer(ans: &str) -> ScriptedResponses {
    ScriptedResponses::One(format!("<answer>{ans}</answer>"))
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let problems = vec![
        Problem::new("big", "How many 12-bit strings?", "4096"),
        Problem::new("hard", "A hard one.", "7"),
        Problem::new("geom", "An angle.", "30"),
        Problem::new("easy", "1+1", "2"),
        Problem::new("proof", "A tricky identity.", "1"),
    ];
    // baseline misses "hard"; the agentic teacher misses "geom" and "proof"
    let baseline = PolicyHandle::scripted(
        "baseline",
        PolicyRole::Reasoning,
        [("hard", "3"), ("geom", "30"), ("easy", "2"), ("proof", "1"), ("big", "4096")]
            .map(|(id, a)| (id.to_string(), answer(a))),
    );
    let agentic = PolicyHandle::scripted(
        "agentic",
        PolicyRole::Agentic,
        [("hard", "7"), ("geom", "45"), ("easy", "2"), ("proof", "0"), ("big", "4096")]
            .map(|(id, a)| (id.to_string(), answer(a))),
    );
    let options = ConnectOptions::default();
    let run = curate(
        &problems,
        baseline.connect(&options)?.as_ref(),
        agentic.connect(&options)?.as_ref(),
        &CurateConfig::default(),
    );
    for c in run.set.agentic_favored.iter().chain(&run.set.reasoning_favored) {
        println!("{:<6} {:?} ({:?})", c.problem.id, c.subset, c.reason);
    }

    let balanced = balance(&run.set, &mut ChaCha8Rng::seed_from_u64(0));
    println!(
        "before {}/{}  after {}/{}",
        run.set.agentic_favored.len(),
        run.set.reasoning_favored.len(),
        balanced.agentic_favored.len(),
        balanced.reasoning_favored.len()
    );
    assert!(balanced.is_disjoint());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
