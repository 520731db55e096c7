//! Problem curation: agentic-favored and reasoning-favored subsets, then
//! balancing by downsampling.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::Signed;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grader::{grade, normalize_answer};
use crate::policy::{output_to_trajectory, FinishReason, GenerationRequest, PolicyError, TextPolicy};
use crate::runtime::{render_prompt, DEFAULT_PROMPT_TEMPLATE};
use crate::trajectory::TransitionCatalog;
use crate::util::parallel_map;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub answer: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

impl Problem {
    pub fn new(id: impl Into<String>, statement: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            statement: statement.into(),
            answer: answer.into(),
            tags: BTreeSet::new(),
        }
    }
}

/// Checks id uniqueness and non-empty answers.
pub fn validate_problems(problems: &[Problem]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for (i, p) in problems.iter().enumerate() {
        if !seen.insert(p.id.as_str()) {
            return Err(format!("problems[{i}].id: duplicate id `{}`", p.id));
        }
        if p.answer.trim().is_empty() {
            return Err(format!("problems[{i}].answer: empty"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectionReason {
    LargeAnswer,
    HardUnderBudget,
    AgenticFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    AgenticFavored,
    ReasoningFavored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedProblem {
    #[serde(flatten)]
    pub problem: Problem,
    pub subset: Subset,
    pub reason: SelectionReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CuratedSet {
    pub agentic_favored: Vec<CuratedProblem>,
    pub reasoning_favored: Vec<CuratedProblem>,
}

impl CuratedSet {
    pub fn is_disjoint(&self) -> bool {
        let ids: BTreeSet<&str> = self.agentic_favored.iter().map(|c| c.problem.id.as_str()).collect();
        self.reasoning_favored.iter().all(|c| !ids.contains(c.problem.id.as_str()))
    }

    pub fn reason_counts(&self) -> BTreeMap<SelectionReason, usize> {
        let mut counts = BTreeMap::new();
        for c in self.agentic_favored.iter().chain(&self.reasoning_favored) {
            *counts.entry(c.reason).or_default() += 1;
        }
        counts
    }

    /// Agentic-favored first, then reasoning-favored.
    pub fn all(&self) -> impl Iterator<Item = &CuratedProblem> {
        self.agentic_favored.iter().chain(&self.reasoning_favored)
    }
}

/// True iff the reference answer is an integer of absolute value above 1000.
pub fn magnitude_filter(p: &Problem) -> bool {
    normalize_answer(&p.answer)
        .as_integer()
        .is_some_and(|n| n.abs() > BigInt::from(1000))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateConfig {
    /// Token budget of the difficulty probe.
    pub probe_budget: usize,
    /// Decoding temperature of both probes.
    pub temperature: f64,
    pub prompt_template: String,
    pub parallelism: usize,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            probe_budget: 4096,
            temperature: 0.0,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            parallelism: 1,
        }
    }
}

fn trial(
    p: &Problem,
    policy: &dyn TextPolicy,
    max_tokens: usize,
    cfg: &CurateConfig,
) -> Result<(bool, FinishReason), PolicyError> {
    let prompt = render_prompt(&cfg.prompt_template, &p.statement)
        .map_err(|e| PolicyError::InvalidRequest(e.to_string()))?;
    let request = GenerationRequest::new(prompt, max_tokens)
        .for_problem(p.id.clone())
        .with_temperature(cfg.temperature);
    let out = policy.generate(&request)?;
    let t = output_to_trajectory(policy.role(), &p.id, &out.text, &TransitionCatalog::default());
    Ok((grade(&t, &p.answer).is_correct(), out.finish))
}

/// One baseline trial under the budget; hard iff it does not solve the
/// problem (running out of budget counts as not solving it).
pub fn probe_difficulty(p: &Problem, baseline: &dyn TextPolicy, cfg: &CurateConfig) -> Result<bool, PolicyError> {
    let (correct, finish) = trial(p, baseline, cfg.probe_budget, cfg)?;
    Ok(!correct || finish == FinishReason::Length)
}

/// One agentic trial; true iff it fails.
pub fn agentic_failure_filter(p: &Problem, agentic: &dyn TextPolicy, cfg: &CurateConfig) -> Result<bool, PolicyError> {
    let (correct, _) = trial(p, agentic, agentic.max_output_tokens(), cfg)?;
    Ok(!correct)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationStats {
    pub input: usize,
    pub reasons: BTreeMap<SelectionReason, usize>,
    pub not_selected: usize,
    pub skipped: usize,
    pub agentic_favored: usize,
    pub reasoning_favored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationRun {
    pub set: CuratedSet,
    pub failures: Vec<crate::composer::ProblemFailure>,
    pub stats: CurationStats,
}

/// Classifies every problem. Agentic-favored (large answer, then hard under
/// budget) is checked before reasoning-favored (agentic failure).
pub fn curate(
    problems: &[Problem],
    baseline: &dyn TextPolicy,
    agentic: &dyn TextPolicy,
    cfg: &CurateConfig,
) -> CurationRun {
    let results = parallel_map(problems, cfg.parallelism, |p| -> Result<Option<CuratedProblem>, PolicyError> {
        let pick = |subset, reason| Some(CuratedProblem {
            problem: p.clone(),
            subset,
            reason,
        });
        if magnitude_filter(p) {
            return Ok(pick(Subset::AgenticFavored, SelectionReason::LargeAnswer));
        }
        if probe_difficulty(p, baseline, cfg)? {
            return Ok(pick(Subset::AgenticFavored, SelectionReason::HardUnderBudget));
        }
        if agentic_failure_filter(p, agentic, cfg)? {
            return Ok(pick(Subset::ReasoningFavored, SelectionReason::AgenticFailure));
        }
        Ok(None)
    });

    let mut run = CurationRun {
        set: CuratedSet::default(),
        failures: Vec::new(),
        stats: CurationStats {
            input: problems.len(),
            ..CurationStats::default()
        },
    };
    for (p, result) in problems.iter().zip(results) {
        match result {
            Ok(Some(c)) => match c.subset {
                Subset::AgenticFavored => run.set.agentic_favored.push(c),
                Subset::ReasoningFavored => run.set.reasoning_favored.push(c),
            },
            Ok(None) => run.stats.not_selected += 1,
            Err(e) => {
                run.stats.skipped += 1;
                run.failures.push(crate::composer::ProblemFailure {
                    problem_id: p.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    run.stats.reasons = run.set.reason_counts();
    run.stats.agentic_favored = run.set.agentic_favored.len();
    run.stats.reasoning_favored = run.set.reasoning_favored.len();
    run
}

fn downsample<R: Rng + ?Sized>(items: &[CuratedProblem], keep: usize, rng: &mut R) -> Vec<CuratedProblem> {
    let mut picked = sample(rng, items.len(), keep).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

/// Uniformly downsamples the larger subset until the sizes differ by at most
/// one. Kept problems stay in their original order.
pub fn balance<R: Rng + ?Sized>(set: &CuratedSet, rng: &mut R) -> CuratedSet {
    let (a, r) = (set.agentic_favored.len(), set.reasoning_favored.len());
    if a.abs_diff(r) <= 1 {
        return set.clone();
    }
    if a > r {
        CuratedSet {
            agentic_favored: downsample(&set.agentic_favored, r, rng),
            reasoning_favored: set.reasoning_favored.clone(),
        }
    } else {
        CuratedSet {
            agentic_favored: set.agentic_favored.clone(),
            reasoning_favored: downsample(&set.reasoning_favored, a, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn with_answer(a: &str) -> Problem {
        Problem::new("p", "s", a)
    }

    #[test]
    fn magnitude_threshold_is_strict() {
        assert!(magnitude_filter(&with_answer("1001")));
        assert!(!magnitude_filter(&with_answer("1000")));
        assert!(magnitude_filter(&with_answer("-2500")));
        assert!(!magnitude_filter(&with_answer("3/2")));
        assert!(!magnitude_filter(&with_answer("1000.5")));
        assert!(magnitude_filter(&with_answer("\\boxed{12{,}345}")));
        assert!(!magnitude_filter(&with_answer("many")));
        assert!(magnitude_filter(&with_answer("2.0e3")));
    }

    fn curated(prefix: &str, n: usize, subset: Subset) -> Vec<CuratedProblem> {
        (0..n)
            .map(|i| CuratedProblem {
                problem: Problem::new(format!("{prefix}{i}"), "s", "1"),
                subset,
                reason: SelectionReason::LargeAnswer,
            })
            .collect()
    }

    #[test]
    fn balance_downsamples_larger_side() {
        let set = CuratedSet {
            agentic_favored: curated("a", 100, Subset::AgenticFavored),
            reasoning_favored: curated("r", 40, Subset::ReasoningFavored),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = balance(&set, &mut rng);
        assert_eq!((b.agentic_favored.len(), b.reasoning_favored.len()), (40, 40));
        assert!(b.is_disjoint());
        let again = balance(&set, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(b, again);
    }

    #[test]
    fn balanced_sets_are_untouched() {
        let set = CuratedSet {
            agentic_favored: curated("a", 5, Subset::AgenticFavored),
            reasoning_favored: curated("r", 5, Subset::ReasoningFavored),
        };
        assert_eq!(balance(&set, &mut ChaCha8Rng::seed_from_u64(0)), set);
    }

    #[test]
    fn problem_validation() {
        let ok = vec![Problem::new("a", "s", "1"), Problem::new("b", "s", "2")];
        assert!(validate_problems(&ok).is_ok());
        let dup = vec![Problem::new("a", "s", "1"), Problem::new("a", "s", "2")];
        assert_eq!(validate_problems(&dup).unwrap_err(), "problems[1].id: duplicate id `a`");
        assert!(validate_problems(&[Problem::new("a", "s", " ")]).is_err());
    }

    #[test]
    fn problem_jsonl_shape() {
        let p: Problem = serde_json::from_str(r#"{"id":"x","statement":"s","answer":"4"}"#).unwrap();
        assert!(p.tags.is_empty());
        let c = CuratedProblem {
            problem: p,
            subset: Subset::ReasoningFavored,
            reason: SelectionReason::AgenticFailure,
        };
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["subset"], "reasoning_favored");
        assert_eq!(v["reason"], "AgenticFailure");
        assert_eq!(v["id"], "x");
    }
}
