//! Loss-mask spans over a composed trajectory and the context-length filter.

use strategy_distill::runtime::ExecResult;
use strategy_distill::trainprep::{RecordMeta, RecordStage};
use strategy_distill::trajectory::{mark_exec_errors, TrajectorySource};
use strategy_distill::{
    context_filter, mask_spans, Segment, TrainingRecord, Trajectory, TransitionCatalog, TransitionKind,
    WhitespaceTagCounter,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = TransitionCatalog::default();
    let failed = strategy_distill::runtime::format_feedback(
        &ExecResult::failed(1, "NameError: name 'x' is not defined"),
        std::time::Duration::from_secs(3),
        2048,
    );
    let mut t = Trajectory::new(
        "p",
        TrajectorySource::Composed,
        vec![
            Segment::think("Guess from the pattern."),
            Segment::answer("14"),
            catalog.segment(TransitionKind::WrongToRightR2A)?,
            Segment::code("print(x)"),
            Segment::executor(failed),
            Segment::code("print(sum(range(6)))"),
            Segment::executor("15\n"),
        ],
    );
    mark_exec_errors(&mut t);

    let text = t.serialize()?;
    let spans = mask_spans(&t)?;
    let chars: Vec<char> = text.chars().collect();
    for s in &spans {
        let masked: String = chars[s.start..s.end].iter().collect();
        println!("mask [{}, {}): {masked:?}", s.start, s.end);
    }

    let meta = RecordMeta {
        problem_id: "p".into(),
        stage: RecordStage::Teacher,
        case: None,
        kind: None,
    };
    let record = TrainingRecord::from_trajectory("p", &t, meta, &WhitespaceTagCounter)?;
    println!("{}", serde_json::to_string(&record)?);

    let (kept, dropped) = context_filter(vec![record], 16);
    println!("limit 16 tokens: kept {} dropped {dropped}", kept.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
