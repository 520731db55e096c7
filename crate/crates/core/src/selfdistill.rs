//! Self-distillation buffer: K graded student rollouts per problem, then
//! verification and correction entries gated by the mean grade.
//!
//! With mean grade `m` over the rollouts (skipped entirely when `m = 1`):
//! `m > β1` adds a verification entry (a correct student trajectory followed
//! by a teacher verification) and `m < β2` adds a correction entry (an
//! incorrect student trajectory followed by a correct teacher solution). The
//! two conditions are independent, so both may fire.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{One, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::curator::Problem;
use crate::grader::{grade, normalize_answer};
use crate::policy::{output_to_trajectory, GenerationRequest, PolicyRole, TextPolicy};
use crate::runtime::{render_prompt, run_agent, Executor, ToolLoopConfig, DEFAULT_PROMPT_TEMPLATE};
use crate::tokens::TokenCounter;
use crate::trajectory::{Trajectory, TrajectoryError, TrajectorySource, TransitionCatalog, TransitionKind};
use crate::util::{derive_seed, parallel_map};

/// An exact threshold in [0, 1], written as a decimal (`0.9`) or a fraction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Threshold(BigRational);

impl Threshold {
    pub fn value(&self) -> &BigRational {
        &self.0
    }

    /// Uses the shortest decimal rendering of `x`, so `0.9` is exactly 9/10.
    pub fn from_f64(x: f64) -> Result<Self, String> {
        x.to_string().parse()
    }
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let value = normalize_answer(s)
            .as_rational()
            .ok_or_else(|| format!("`{s}` is not a number"))?;
        if value < BigRational::zero() || value > BigRational::one() {
            return Err(format!("`{s}` is outside [0, 1]"));
        }
        Ok(Threshold(value))
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Threshold::from_f64(x),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

fn ratio_to_big(r: &Ratio<usize>) -> BigRational {
    BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutStats {
    pub problem_id: String,
    pub grades: Vec<u8>,
    pub mean: Ratio<usize>,
}

impl RolloutStats {
    pub fn from_grades(problem_id: impl Into<String>, grades: Vec<u8>) -> Self {
        assert!(!grades.is_empty(), "at least one rollout");
        let correct = grades.iter().filter(|&&g| g == 1).count();
        let mean = Ratio::new(correct, grades.len());
        Self {
            problem_id: problem_id.into(),
            grades,
            mean,
        }
    }

    pub fn mean_string(&self) -> String {
        format!("{}/{}", self.mean.numer(), self.mean.denom())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    pub problem: Problem,
    pub stats: RolloutStats,
    pub trajectories: Vec<Trajectory>,
    /// Samples lost to transport errors.
    pub failed_samples: usize,
    pub seed: u64,
}

/// How student samples are produced.
pub struct RolloutEngine<'a> {
    pub prompt_template: String,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Run samples through the tool loop instead of plain generation.
    pub tools: Option<(&'a dyn Executor, &'a ToolLoopConfig)>,
    pub counter: &'a dyn TokenCounter,
    pub catalog: &'a TransitionCatalog,
}

#[derive(Debug, Error)]
pub enum SelfDistillError {
    #[error("K must be at least 1")]
    ZeroSamples,
    #[error("all {k} samples failed for problem {problem_id}: {last}")]
    AllSamplesFailed { problem_id: String, k: usize, last: String },
    #[error("thresholds must satisfy 0 <= beta1 < beta2 <= 1, got {beta1} and {beta2}")]
    Thresholds { beta1: Threshold, beta2: Threshold },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Samples and grades `k` student trajectories.
pub fn sample_and_grade(
    problem: &Problem,
    student: &dyn TextPolicy,
    k: usize,
    seed: u64,
    engine: &RolloutEngine<'_>,
) -> Result<Rollouts, SelfDistillError> {
    if k == 0 {
        return Err(SelfDistillError::ZeroSamples);
    }
    let mut grades = Vec::with_capacity(k);
    let mut trajectories = Vec::with_capacity(k);
    let mut last_error = String::new();
    for j in 0..k {
        let sample_seed = derive_seed(seed, &problem.id, j as u64);
        let sampled = match engine.tools {
            Some((executor, cfg)) => {
                let cfg = ToolLoopConfig {
                    temperature: engine.temperature,
                    ..cfg.clone()
                };
                let indexed = SampleIndexed {
                    inner: student,
                    sample: j as u32,
                };
                run_agent(problem, &indexed, executor, &cfg, engine.counter, engine.catalog, Some(sample_seed))
                    .map(|trace| trace.trajectory)
                    .map_err(|e| e.to_string())
            }
            None => render_prompt(&engine.prompt_template, &problem.statement)
                .map_err(|e| e.to_string())
                .and_then(|prompt| {
                    let request = GenerationRequest::new(prompt, engine.max_tokens)
                        .for_problem(problem.id.clone())
                        .with_temperature(engine.temperature)
                        .with_seed(sample_seed)
                        .with_sample(j as u32);
                    student.generate(&request).map_err(|e| e.to_string())
                })
                .map(|out| output_to_trajectory(PolicyRole::Student, &problem.id, &out.text, engine.catalog)),
        };
        match sampled {
            Ok(t) => {
                grades.push(grade(&t, &problem.answer).grade);
                trajectories.push(t);
            }
            Err(e) => last_error = e,
        }
    }
    if trajectories.is_empty() {
        return Err(SelfDistillError::AllSamplesFailed {
            problem_id: problem.id.clone(),
            k,
            last: last_error,
        });
    }
    Ok(Rollouts {
        problem: problem.clone(),
        stats: RolloutStats::from_grades(problem.id.clone(), grades),
        failed_samples: k - trajectories.len(),
        trajectories,
        seed,
    })
}

/// Forwards to a policy with a fixed sample number on every request.
struct SampleIndexed<'a> {
    inner: &'a dyn TextPolicy,
    sample: u32,
}

impl TextPolicy for SampleIndexed<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn role(&self) -> PolicyRole {
        self.inner.role()
    }

    fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<crate::policy::GenerationResult, crate::policy::PolicyError> {
        let mut request = request.clone();
        request.sample = self.sample;
        self.inner.generate(&request)
    }

    fn max_output_tokens(&self) -> usize {
        self.inner.max_output_tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Verification,
    Correction,
}

/// What follows the verification transition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationMode {
    /// A full, correct reasoning-teacher solution.
    #[default]
    FullTeacher,
    /// Only the transition sentence.
    TemplateOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfDistillEntry {
    pub problem_id: String,
    pub kind: EntryKind,
    pub student_traj: Trajectory,
    pub teacher_traj: Option<Trajectory>,
    pub composed: Trajectory,
    pub mean: Ratio<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub problem_id: String,
    pub kind: EntryKind,
    pub mean: String,
    pub composed_text: String,
    pub seed: u64,
}

impl SelfDistillEntry {
    pub fn to_record(&self) -> Result<EntryRecord, TrajectoryError> {
        Ok(EntryRecord {
            problem_id: self.problem_id.clone(),
            kind: self.kind,
            mean: format!("{}/{}", self.mean.numer(), self.mean.denom()),
            composed_text: self.composed.serialize()?,
            seed: self.seed,
        })
    }

    /// Re-grades the parts against the reference answer.
    pub fn check(&self, gold: &str) -> Result<(), String> {
        let student = grade(&self.student_traj, gold).grade;
        let teacher = self.teacher_traj.as_ref().map(|t| grade(t, gold).grade);
        match self.kind {
            EntryKind::Verification if student != 1 => Err("verification student trajectory is not correct".into()),
            EntryKind::Correction if student != 0 => Err("correction student trajectory is not incorrect".into()),
            EntryKind::Correction if teacher != Some(1) => Err("correction teacher trajectory is not correct".into()),
            _ if teacher == Some(0) => Err("teacher trajectory is not correct".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub beta1: Threshold,
    pub beta2: Threshold,
    /// Extra teacher attempts after the first incorrect one.
    pub teacher_retries: usize,
    pub verification: VerificationMode,
    pub prompt_template: String,
    pub temperature: f64,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            beta1: Threshold(BigRational::zero()),
            beta2: Threshold(BigRational::new(9.into(), 10.into())),
            teacher_retries: 2,
            verification: VerificationMode::FullTeacher,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            temperature: 0.0,
            seed: 0,
            parallelism: 1,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<(), SelfDistillError> {
        if self.beta1 >= self.beta2 {
            return Err(SelfDistillError::Thresholds {
                beta1: self.beta1.clone(),
                beta2: self.beta2.clone(),
            });
        }
        Ok(())
    }
}

/// Entry kinds the thresholds select for a mean grade.
pub fn entry_kinds(mean: &Ratio<usize>, cfg: &BufferConfig) -> Vec<EntryKind> {
    let m = ratio_to_big(mean);
    if m.is_one() {
        return Vec::new();
    }
    let mut kinds = Vec::new();
    if &m > cfg.beta1.value() {
        kinds.push(EntryKind::Verification);
    }
    if &m < cfg.beta2.value() {
        kinds.push(EntryKind::Correction);
    }
    kinds
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub problems: usize,
    pub verification: usize,
    pub correction: usize,
    pub dropped_verification: usize,
    pub dropped_correction: usize,
    pub all_correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferRun {
    pub entries: Vec<SelfDistillEntry>,
    pub stats: BufferStats,
}

fn teacher_solution(
    problem: &Problem,
    teacher: &dyn TextPolicy,
    cfg: &BufferConfig,
    catalog: &TransitionCatalog,
) -> Option<Trajectory> {
    let prompt = render_prompt(&cfg.prompt_template, &problem.statement).ok()?;
    (0..=cfg.teacher_retries).find_map(|attempt| {
        let request = GenerationRequest::new(prompt.clone(), teacher.max_output_tokens())
            .for_problem(problem.id.clone())
            .with_temperature(cfg.temperature)
            .with_seed(derive_seed(cfg.seed, &problem.id, 1_000 + attempt as u64))
            .with_sample(attempt as u32);
        match teacher.generate(&request) {
            Ok(out) => {
                let t = output_to_trajectory(PolicyRole::Reasoning, &problem.id, &out.text, catalog);
                grade(&t, &problem.answer).is_correct().then_some(t)
            }
            Err(e) => {
                tracing::warn!(problem = %problem.id, attempt, error = %e, "teacher call failed");
                None
            }
        }
    })
}

fn entries_for(
    rollouts: &Rollouts,
    teacher: &dyn TextPolicy,
    cfg: &BufferConfig,
    catalog: &TransitionCatalog,
) -> Result<(Vec<SelfDistillEntry>, BufferStats), SelfDistillError> {
    let mut stats = BufferStats {
        problems: 1,
        ..BufferStats::default()
    };
    let kinds = entry_kinds(&rollouts.stats.mean, cfg);
    if kinds.is_empty() {
        if rollouts.stats.mean.is_integer() && *rollouts.stats.mean.numer() == 1 {
            stats.all_correct = 1;
        }
        return Ok((Vec::new(), stats));
    }
    let needs_teacher =
        kinds.contains(&EntryKind::Correction) || cfg.verification == VerificationMode::FullTeacher;
    let teacher_traj = if needs_teacher {
        teacher_solution(&rollouts.problem, teacher, cfg, catalog)
    } else {
        None
    };

    let mut entries = Vec::new();
    for kind in kinds {
        let (want, transition) = match kind {
            EntryKind::Verification => (1, TransitionKind::SelfVerify),
            EntryKind::Correction => (0, TransitionKind::SelfCorrect),
        };
        let index = rollouts.stats.grades.iter().position(|&g| g == want).expect("mean implies a match");
        let student = &rollouts.trajectories[index];
        let attached = match (kind, cfg.verification) {
            (EntryKind::Verification, VerificationMode::TemplateOnly) => None,
            _ => match &teacher_traj {
                Some(t) => Some(t.clone()),
                None => {
                    match kind {
                        EntryKind::Verification => stats.dropped_verification += 1,
                        EntryKind::Correction => stats.dropped_correction += 1,
                    }
                    continue;
                }
            },
        };
        let mut segments = student.segments.clone();
        segments.push(catalog.segment(transition)?);
        if let Some(t) = &attached {
            segments.extend(t.segments.iter().cloned());
        }
        match kind {
            EntryKind::Verification => stats.verification += 1,
            EntryKind::Correction => stats.correction += 1,
        }
        entries.push(SelfDistillEntry {
            problem_id: rollouts.problem.id.clone(),
            kind,
            student_traj: student.clone(),
            teacher_traj: attached,
            composed: Trajectory::new(rollouts.problem.id.clone(), TrajectorySource::Composed, segments),
            mean: rollouts.stats.mean,
            seed: rollouts.seed,
        });
    }
    Ok((entries, stats))
}

/// Builds the buffer. Output order follows input order, verification before
/// correction within a problem.
pub fn build_buffer(
    rollouts: &[Rollouts],
    teacher: &dyn TextPolicy,
    cfg: &BufferConfig,
    catalog: &TransitionCatalog,
) -> Result<BufferRun, SelfDistillError> {
    cfg.validate()?;
    let results = parallel_map(rollouts, cfg.parallelism, |r| entries_for(r, teacher, cfg, catalog));
    let mut run = BufferRun {
        entries: Vec::new(),
        stats: BufferStats::default(),
    };
    for result in results {
        let (entries, stats) = result?;
        run.entries.extend(entries);
        run.stats.problems += stats.problems;
        run.stats.verification += stats.verification;
        run.stats.correction += stats.correction;
        run.stats.dropped_verification += stats.dropped_verification;
        run.stats.dropped_correction += stats.dropped_correction;
        run.stats.all_correct += stats.all_correct;
    }
    Ok(run)
}
