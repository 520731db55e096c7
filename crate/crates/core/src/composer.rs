//! Trajectory composition from two teachers.
//!
//! For each problem a fair coin picks which teacher answers first. The first
//! attempt runs under a random token budget; the second teacher answers from
//! the problem alone. Both are graded and routed through the case table:
//!
//! | g1 | g2 | result                                   |
//! |----|----|------------------------------------------|
//! | 0  | 1  | y1 ⊕ wrong-to-right transition ⊕ y2      |
//! | 1  | 1  | y1 ⊕ right-to-right transition ⊕ y2      |
//! | 1  | 0  | y1                                       |
//! | 0  | 0  | discarded                                |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curator::Problem;
use crate::grader::grade;
use crate::policy::{
    draw_first_budget, output_to_trajectory, second_teacher_prompt, BudgetRange, FinishReason,
    GenerationRequest, PolicyError, PolicyRole, TextPolicy,
};
use crate::runtime::{render_prompt, DEFAULT_PROMPT_TEMPLATE};
use crate::trajectory::{Trajectory, TrajectoryError, TrajectorySource, TransitionCatalog, TransitionKind};
use crate::util::{derive_seed, parallel_map};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompositionCase {
    CorrectedBySecond,
    BothCorrect,
    FirstOnly,
    Discarded,
}

impl CompositionCase {
    pub fn from_grades(g1: u8, g2: u8) -> Self {
        match (g1 != 0, g2 != 0) {
            (false, true) => CompositionCase::CorrectedBySecond,
            (true, true) => CompositionCase::BothCorrect,
            (true, false) => CompositionCase::FirstOnly,
            (false, false) => CompositionCase::Discarded,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CompositionCase::CorrectedBySecond => "CorrectedBySecond",
            CompositionCase::BothCorrect => "BothCorrect",
            CompositionCase::FirstOnly => "FirstOnly",
            CompositionCase::Discarded => "Discarded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionOutcome {
    pub problem_id: String,
    /// 1: agentic teacher went first.
    pub z: u8,
    pub g1: u8,
    pub g2: u8,
    pub case: CompositionCase,
    pub composed: Option<Trajectory>,
    pub l0: Option<usize>,
    pub seed: Option<u64>,
}

/// One line of the composition output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub problem_id: String,
    pub z: u8,
    pub g1: u8,
    pub g2: u8,
    pub case: CompositionCase,
    pub composed_text: Option<String>,
    pub l0: Option<usize>,
    pub seed: Option<u64>,
}

impl CompositionOutcome {
    pub fn to_record(&self) -> Result<OutcomeRecord, TrajectoryError> {
        Ok(OutcomeRecord {
            problem_id: self.problem_id.clone(),
            z: self.z,
            g1: self.g1,
            g2: self.g2,
            case: self.case,
            composed_text: self.composed.as_ref().map(Trajectory::serialize).transpose()?,
            l0: self.l0,
            seed: self.seed,
        })
    }
}

/// Fair coin: 1 means the agentic teacher answers first.
pub fn draw_order<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    u8::from(rng.gen_bool(0.5))
}

fn transition_for(case: CompositionCase, z: u8) -> Option<TransitionKind> {
    let agentic_first = z == 1;
    match case {
        CompositionCase::CorrectedBySecond if agentic_first => Some(TransitionKind::WrongToRightA2R),
        CompositionCase::CorrectedBySecond => Some(TransitionKind::WrongToRightR2A),
        CompositionCase::BothCorrect if agentic_first => Some(TransitionKind::RightToRightA2R),
        CompositionCase::BothCorrect => Some(TransitionKind::RightToRightR2A),
        _ => None,
    }
}

/// Applies the case table to one graded pair of attempts.
pub fn compose_pair(
    problem: &Problem,
    first: &Trajectory,
    g1: u8,
    second: &Trajectory,
    g2: u8,
    z: u8,
    catalog: &TransitionCatalog,
) -> Result<CompositionOutcome, TrajectoryError> {
    let case = CompositionCase::from_grades(g1, g2);
    let composed = match case {
        CompositionCase::Discarded => None,
        CompositionCase::FirstOnly => Some(first.clone()),
        CompositionCase::CorrectedBySecond | CompositionCase::BothCorrect => {
            let kind = transition_for(case, z).expect("switching case");
            let mut segments = first.segments.clone();
            segments.push(catalog.segment(kind)?);
            segments.extend(second.segments.iter().cloned());
            Some(Trajectory::new(problem.id.clone(), TrajectorySource::Composed, segments))
        }
    };
    Ok(CompositionOutcome {
        problem_id: problem.id.clone(),
        z,
        g1: u8::from(g1 != 0),
        g2: u8::from(g2 != 0),
        case,
        composed,
        l0: None,
        seed: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub seed: u64,
    pub l0_range: BudgetRange,
    pub prompt_template: String,
    /// Show the first attempt to the second teacher. Off by default: the
    /// second teacher answers from the problem alone.
    pub include_first_attempt: bool,
    pub temperature: f64,
    pub parallelism: usize,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            l0_range: BudgetRange::default(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            include_first_attempt: false,
            temperature: 0.0,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionStats {
    #[serde(rename = "CorrectedBySecond")]
    pub corrected_by_second: usize,
    #[serde(rename = "BothCorrect")]
    pub both_correct: usize,
    #[serde(rename = "FirstOnly")]
    pub first_only: usize,
    #[serde(rename = "Discarded")]
    pub discarded: usize,
    #[serde(rename = "Skipped")]
    pub skipped: usize,
}

impl CompositionStats {
    pub fn record(&mut self, case: CompositionCase) {
        match case {
            CompositionCase::CorrectedBySecond => self.corrected_by_second += 1,
            CompositionCase::BothCorrect => self.both_correct += 1,
            CompositionCase::FirstOnly => self.first_only += 1,
            CompositionCase::Discarded => self.discarded += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.corrected_by_second + self.both_correct + self.first_only + self.discarded + self.skipped
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemFailure {
    pub problem_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionRun {
    pub outcomes: Vec<CompositionOutcome>,
    pub failures: Vec<ProblemFailure>,
    pub stats: CompositionStats,
}

#[derive(Debug, thiserror::Error)]
enum ComposeError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
}

fn compose_one(
    index: usize,
    problem: &Problem,
    agentic: &dyn TextPolicy,
    reasoning: &dyn TextPolicy,
    cfg: &ComposeConfig,
    catalog: &TransitionCatalog,
) -> Result<CompositionOutcome, ComposeError> {
    let seed = derive_seed(cfg.seed, &problem.id, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = draw_order(&mut rng);
    let l0 = draw_first_budget(&mut rng, cfg.l0_range)?;
    let (first, second, first_role, second_role) = if z == 1 {
        (agentic, reasoning, PolicyRole::Agentic, PolicyRole::Reasoning)
    } else {
        (reasoning, agentic, PolicyRole::Reasoning, PolicyRole::Agentic)
    };

    let prompt = render_prompt(&cfg.prompt_template, &problem.statement)?;
    let request = GenerationRequest::new(prompt.clone(), l0)
        .for_problem(problem.id.clone())
        .with_temperature(cfg.temperature)
        .with_seed(seed);
    let out1 = first.generate(&request)?;
    let y1 = output_to_trajectory(first_role, &problem.id, &out1.text, catalog);
    // an attempt that ran out of budget is unsuccessful whatever it contains
    let g1 = if out1.finish == FinishReason::Length {
        0
    } else {
        grade(&y1, &problem.answer).grade
    };

    let prompt2 = if cfg.include_first_attempt {
        format!("{prompt}\n\n{}", y1.serialize()?)
    } else {
        second_teacher_prompt(&cfg.prompt_template, problem, &y1)?
    };
    let request2 = GenerationRequest::new(prompt2, second.max_output_tokens())
        .for_problem(problem.id.clone())
        .with_temperature(cfg.temperature)
        .with_seed(seed.wrapping_add(1));
    let out2 = second.generate(&request2)?;
    let y2 = output_to_trajectory(second_role, &problem.id, &out2.text, catalog);
    let g2 = grade(&y2, &problem.answer).grade;

    let mut outcome = compose_pair(problem, &y1, g1, &y2, g2, z, catalog)?;
    outcome.l0 = Some(l0);
    outcome.seed = Some(seed);
    Ok(outcome)
}

/// Composes trajectories for every problem. Per-problem failures are
/// recorded and skipped; outcomes keep input order.
pub fn compose_dataset(
    problems: &[Problem],
    agentic: &dyn TextPolicy,
    reasoning: &dyn TextPolicy,
    cfg: &ComposeConfig,
    catalog: &TransitionCatalog,
) -> CompositionRun {
    let indexed: Vec<(usize, &Problem)> = problems.iter().enumerate().collect();
    let results = parallel_map(&indexed, cfg.parallelism, |(i, p)| {
        compose_one(*i, p, agentic, reasoning, cfg, catalog).map_err(|e| ProblemFailure {
            problem_id: p.id.clone(),
            error: e.to_string(),
        })
    });
    let mut run = CompositionRun {
        outcomes: Vec::new(),
        failures: Vec::new(),
        stats: CompositionStats::default(),
    };
    for result in results {
        match result {
            Ok(outcome) => {
                run.stats.record(outcome.case);
                run.outcomes.push(outcome);
            }
            Err(failure) => {
                tracing::warn!(problem = %failure.problem_id, error = %failure.error, "composition skipped");
                run.stats.skipped += 1;
                run.failures.push(failure);
            }
        }
    }
    run
}
