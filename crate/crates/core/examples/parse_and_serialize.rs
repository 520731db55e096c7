//! Parse tagged model output into segments and serialize it back.

use strategy_distill::trajectory::{TrajectorySource, META_TRUNCATED};
use strategy_distill::{SegmentKind, Trajectory, TransitionCatalog, TransitionKind};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let text = "<think>Count the subsets.</think><code>print(2**10)</code><executor>1024\n</executor><answer>1024</answer>";
    let t = Trajectory::parse("p1", TrajectorySource::AgenticTeacher, text);
    for seg in &t.segments {
        println!("{:<10} {:?}", format!("{:?}", seg.kind), seg.text);
    }
    assert_eq!(t.serialize()?, text);

    // transitions are bare sentences recognised through the catalog
    let catalog = TransitionCatalog::default();
    let switch = catalog.get(TransitionKind::WrongToRightR2A).unwrap_or_default();
    let composed = format!("<answer>12</answer>{switch}<code>print(1)</code>");
    let t = Trajectory::parse_with("p2", TrajectorySource::Composed, &composed, &catalog);
    assert_eq!(t.segments[1].kind, SegmentKind::Transition);
    assert_eq!(t.segments[1].transition_kind(), Some(TransitionKind::WrongToRightR2A));

    let cut = Trajectory::parse("p3", TrajectorySource::Student, "<think>still going");
    println!("unclosed tail flagged truncated: {}", cut.segments[0].flag(META_TRUNCATED));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
