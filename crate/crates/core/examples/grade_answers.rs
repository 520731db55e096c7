//! Answer normalization, exact/fuzzy grading and accuracy under a token budget.

use strategy_distill::{acc_at_budget, grade_text, math_equal, normalize_answer, WhitespaceTagCounter};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for (a, b) in [("0.5", "\\frac{1}{2}"), ("1,000", "1000"), ("\\boxed{42}", "42.0"), ("3/4", "0.7")] {
        let same = math_equal(&normalize_answer(a), &normalize_answer(b));
        println!("{a:>12} vs {b:<12} equal={same}");
    }

    let output = "<think>2^10 is 1024</think><answer>\\boxed{1024}</answer>";
    let report = grade_text(output, "1024");
    println!("grade={} stage={:?} candidate={:?}", report.grade, report.stage, report.candidate);

    // "<think>2^10" after two tokens
    let counter = WhitespaceTagCounter;
    println!("Acc(2)={} Acc(64)={}", acc_at_budget(output, "1024", 2, &counter), acc_at_budget(output, "1024", 64, &counter));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
