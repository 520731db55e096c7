//! One function per pipeline stage. Each reads its inputs, writes its outputs
//! atomically into the output directory and leaves a `<stage>.manifest.json`
//! beside them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::composer::{compose_dataset, ComposeConfig, OutcomeRecord, ProblemFailure};
use crate::config::{ConfigError, PipelineConfig};
use crate::curator::{balance, curate, validate_problems, CurateConfig, Problem};
use crate::grader::{grade_text, GradeReport};
use crate::policy::{ConnectOptions, PolicyError, TextPolicy};
use crate::runtime::{evaluate, EvalSetup};
use crate::selfdistill::{build_buffer, sample_and_grade, EntryRecord, RolloutEngine, Rollouts};
use crate::tokens::{TokenCounter, WhitespaceTagCounter};
use crate::trainprep::{emit_records, prepare};
use crate::trajectory::TransitionCatalog;
use crate::util::{derive_seed, parallel_map, read_jsonl, sha256_hex, write_atomic, write_jsonl, JsonlError};

pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const ENTRIES_FILE: &str = "entries.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Stage(String),
    #[error("writing outputs: {0}")]
    Io(#[from] std::io::Error),
}

/// Reproducibility record written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input file name → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, Value>,
    /// Items that failed and are missing from the outputs.
    pub failures: usize,
    pub partial: bool,
    pub created_at: String,
}

impl Manifest {
    pub fn path(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}.manifest.json"))
    }

    /// The manifest without its timestamp, for run-to-run comparison.
    pub fn without_timestamp(&self) -> Manifest {
        Manifest {
            created_at: String::new(),
            ..self.clone()
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    catalog: TransitionCatalog,
    counter: Arc<dyn TokenCounter>,
}

/// Collects outputs of one stage, then writes the manifest.
struct Stage<'a> {
    pipeline: &'a Pipeline,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    counts: BTreeMap<String, Value>,
    failures: usize,
}

impl<'a> Stage<'a> {
    fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        let bytes = fs::read(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        write_atomic(&self.pipeline.out_dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), PipelineError> {
        let path = self.pipeline.out_dir.join(name);
        write_jsonl(&path, items)?;
        self.outputs.insert(name.to_string(), sha256_hex(&fs::read(&path)?));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn count(&mut self, key: &str, value: impl Serialize) {
        self.counts
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn fail(&mut self, failures: &[ProblemFailure]) -> Result<(), PipelineError> {
        self.failures += failures.len();
        if !failures.is_empty() {
            self.write_jsonl(&format!("{}_failures.jsonl", self.command), failures)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<Manifest, PipelineError> {
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.pipeline.config.seed,
            config_hash: self.pipeline.config.hash(),
            inputs: self.inputs,
            outputs: self.outputs,
            counts: self.counts,
            failures: self.failures,
            partial: self.failures > 0,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(&Manifest::path(&self.pipeline.out_dir, self.command), &bytes)?;
        Ok(manifest)
    }
}

fn load_problems(path: &Path) -> Result<Vec<Problem>, PipelineError> {
    let problems: Vec<Problem> = read_jsonl(path)?;
    validate_problems(&problems).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    Ok(problems)
}

/// Input line of `grade`.
#[derive(Debug, Clone, Deserialize)]
pub struct GradeInput {
    #[serde(default)]
    pub id: Option<String>,
    pub output: String,
    pub gold: String,
}

#[derive(Debug, Clone, Serialize)]
struct GradeLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(flatten)]
    report: GradeReport,
}

#[derive(Debug, Clone, Serialize)]
struct RolloutLine<'a> {
    problem_id: &'a str,
    grades: &'a [u8],
    mean: String,
    failed_samples: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        config.validate()?;
        let catalog = config
            .catalog()
            .map_err(|e| ConfigError::Invalid {
                path: "transitions".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            config,
            out_dir: out_dir.into(),
            catalog,
            counter: Arc::new(WhitespaceTagCounter),
        })
    }

    pub fn catalog(&self) -> &TransitionCatalog {
        &self.catalog
    }

    fn policy(&self, name: &str) -> Result<Arc<dyn TextPolicy>, PipelineError> {
        let handle = self.config.policy(name)?;
        let options = ConnectOptions {
            counter: self.counter.clone(),
            ..ConnectOptions::default()
        };
        Ok(handle.connect(&options)?)
    }

    fn stage(&self, command: &'static str) -> Stage<'_> {
        Stage {
            pipeline: self,
            command,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            counts: BTreeMap::new(),
            failures: 0,
        }
    }

    /// Writes `outcomes.jsonl` and `compose_stats.json`.
    pub fn compose(&self, problems_path: &Path) -> Result<Manifest, PipelineError> {
        let agentic = self.policy("agentic")?;
        let reasoning = self.policy("reasoning")?;
        let mut stage = self.stage("compose");
        stage.input(problems_path)?;
        let problems = load_problems(problems_path)?;
        let cfg = ComposeConfig {
            seed: self.config.seed,
            l0_range: self.config.l0_range,
            prompt_template: self.config.tool_loop.prompt_template.clone(),
            include_first_attempt: self.config.include_first_attempt,
            temperature: self.config.teacher_temperature,
            parallelism: self.config.parallelism,
        };
        let run = compose_dataset(&problems, agentic.as_ref(), reasoning.as_ref(), &cfg, &self.catalog);
        let records = run
            .outcomes
            .iter()
            .map(|o| o.to_record())
            .collect::<Result<Vec<OutcomeRecord>, _>>()
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        stage.write_jsonl(OUTCOMES_FILE, &records)?;
        stage.write_json("compose_stats.json", &run.stats)?;
        stage.fail(&run.failures)?;
        stage.count("problems", problems.len());
        stage.count("cases", run.stats);
        stage.finish()
    }

    /// Writes the balanced `curated.jsonl` and `curate_stats.json`.
    pub fn curate(&self, problems_path: &Path) -> Result<Manifest, PipelineError> {
        let baseline = self.policy("baseline")?;
        let agentic = self.policy("agentic")?;
        let mut stage = self.stage("curate");
        stage.input(problems_path)?;
        let problems = load_problems(problems_path)?;
        let cfg = CurateConfig {
            probe_budget: self.config.probe_budget,
            temperature: self.config.teacher_temperature,
            prompt_template: self.config.tool_loop.prompt_template.clone(),
            parallelism: self.config.parallelism,
        };
        let run = curate(&problems, baseline.as_ref(), agentic.as_ref(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "balance", 0));
        let balanced = balance(&run.set, &mut rng);
        let lines: Vec<_> = balanced
            .agentic_favored
            .iter()
            .chain(&balanced.reasoning_favored)
            .collect();
        stage.write_jsonl("curated.jsonl", &lines)?;
        stage.write_json("curate_stats.json", &run.stats)?;
        stage.fail(&run.failures)?;
        stage.count("problems", problems.len());
        stage.count("agentic_favored", balanced.agentic_favored.len());
        stage.count("reasoning_favored", balanced.reasoning_favored.len());
        stage.finish()
    }

    /// Samples K student rollouts per problem and builds the buffer; writes
    /// `rollouts.jsonl`, `entries.jsonl` and `selfdistill_stats.json`.
    pub fn selfdistill(&self, problems_path: &Path) -> Result<Manifest, PipelineError> {
        let student = self.policy("student")?;
        let teacher = self.policy("reasoning")?;
        let mut stage = self.stage("selfdistill");
        stage.input(problems_path)?;
        let problems = load_problems(problems_path)?;
        let executor = self.config.executor.build();
        let tool_loop = self.config.tool_loop.clone();
        let engine = RolloutEngine {
            prompt_template: self.config.tool_loop.prompt_template.clone(),
            temperature: self.config.sampling_temperature,
            max_tokens: self.config.tool_loop.total_token_budget,
            tools: self
                .config
                .rollout_tools
                .then_some((executor.as_ref(), &tool_loop)),
            counter: self.counter.as_ref(),
            catalog: &self.catalog,
        };
        let sampled = parallel_map(&problems, self.config.parallelism, |p| {
            sample_and_grade(p, student.as_ref(), self.config.k, self.config.seed, &engine)
        });
        let mut rollouts: Vec<Rollouts> = Vec::new();
        let mut failures = Vec::new();
        for (p, r) in problems.iter().zip(sampled) {
            match r {
                Ok(r) => rollouts.push(r),
                Err(e) => failures.push(ProblemFailure {
                    problem_id: p.id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        let run = build_buffer(&rollouts, teacher.as_ref(), &self.config.buffer_config(), &self.catalog)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        let entries = run
            .entries
            .iter()
            .map(|e| e.to_record())
            .collect::<Result<Vec<EntryRecord>, _>>()
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        let lines: Vec<_> = rollouts
            .iter()
            .map(|r| RolloutLine {
                problem_id: &r.stats.problem_id,
                grades: &r.stats.grades,
                mean: r.stats.mean_string(),
                failed_samples: r.failed_samples,
            })
            .collect();
        stage.write_jsonl("rollouts.jsonl", &lines)?;
        stage.write_jsonl(ENTRIES_FILE, &entries)?;
        stage.write_json("selfdistill_stats.json", &run.stats)?;
        stage.fail(&failures)?;
        stage.count("problems", problems.len());
        stage.count("failed_samples", rollouts.iter().map(|r| r.failed_samples).sum::<usize>());
        stage.count("buffer", run.stats);
        stage.finish()
    }

    /// Turns composition outcomes and buffer entries into `train.jsonl` and
    /// `train_stats.json`. Missing inputs count as empty.
    pub fn trainprep(&self, outcomes: Option<&Path>, entries: Option<&Path>) -> Result<Manifest, PipelineError> {
        let mut stage = self.stage("trainprep");
        let outcome_records: Vec<OutcomeRecord> = match outcomes {
            Some(path) => {
                stage.input(path)?;
                read_jsonl(path)?
            }
            None => Vec::new(),
        };
        let entry_records: Vec<EntryRecord> = match entries {
            Some(path) => {
                stage.input(path)?;
                read_jsonl(path)?
            }
            None => Vec::new(),
        };
        let run = prepare(
            &outcome_records,
            &entry_records,
            self.config.context_limits,
            &self.catalog,
            self.counter.as_ref(),
        )
        .map_err(|e| PipelineError::Stage(e.to_string()))?;
        let records_path = self.out_dir.join(TRAIN_FILE);
        let stats_path = self.out_dir.join("train_stats.json");
        emit_records(&run, &records_path, &stats_path)?;
        for (name, path) in [(TRAIN_FILE, &records_path), ("train_stats.json", &stats_path)] {
            stage.outputs.insert(name.to_string(), sha256_hex(&fs::read(path)?));
        }
        stage.count("records", run.records.len());
        stage.count("dropped_teacher", run.dropped_teacher);
        stage.count("dropped_selfdistill", run.dropped_selfdistill);
        stage.count("cases", &run.stats);
        stage.finish()
    }

    /// Runs the tool loop once per problem and grades at both budgets;
    /// writes `eval.csv` and `eval_traces.jsonl`.
    pub fn eval(&self, problems_path: &Path) -> Result<Manifest, PipelineError> {
        let policy = self.policy(&self.config.eval_policy.clone())?;
        let mut stage = self.stage("eval");
        stage.input(problems_path)?;
        let problems = load_problems(problems_path)?;
        let executor = self.config.executor.build();
        let setup = EvalSetup {
            policy: policy.as_ref(),
            executor: executor.as_ref(),
            tool_loop: &self.config.tool_loop,
            counter: self.counter.as_ref(),
            catalog: &self.catalog,
            parallelism: self.config.parallelism,
            seed: Some(self.config.seed),
        };
        let report = evaluate(&problems, &setup, &self.config.budgets.as_vec()).map_err(PipelineError::Stage)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv).map_err(std::io::Error::other)?;
        stage.write("eval.csv", &csv)?;
        stage.write_jsonl("eval_traces.jsonl", &report.traces)?;
        let failures: Vec<ProblemFailure> = report
            .traces
            .iter()
            .filter_map(|t| {
                t.error.as_ref().map(|e| ProblemFailure {
                    problem_id: t.problem_id.clone(),
                    error: e.clone(),
                })
            })
            .collect();
        stage.fail(&failures)?;
        stage.count("problems", problems.len());
        stage.count(
            "accuracy",
            report
                .rows
                .iter()
                .map(|r| (r.budget.to_string(), json!({ "correct": r.correct, "n": r.n })))
                .collect::<BTreeMap<_, _>>(),
        );
        stage.finish()
    }

    /// Grades `{output, gold}` lines into `grades.jsonl`.
    pub fn grade(&self, pairs_path: &Path) -> Result<Manifest, PipelineError> {
        let mut stage = self.stage("grade");
        stage.input(pairs_path)?;
        let pairs: Vec<GradeInput> = read_jsonl(pairs_path)?;
        let lines: Vec<GradeLine> = pairs
            .into_iter()
            .map(|p| GradeLine {
                report: grade_text(&p.output, &p.gold),
                id: p.id,
            })
            .collect();
        let correct = lines.iter().filter(|l| l.report.grade == 1).count();
        stage.write_jsonl("grades.jsonl", &lines)?;
        stage.count("pairs", lines.len());
        stage.count("correct", correct);
        stage.finish()
    }
}

/// Summary of every manifest found in `out_dir`, keyed by command.
pub fn collect_stats(out_dir: &Path) -> Result<BTreeMap<String, Value>, PipelineError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(out_dir).map_err(|e| PipelineError::Input(format!("{}: {e}", out_dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(command) = name.strip_suffix(".manifest.json") else { continue };
        let text = fs::read_to_string(&path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        out.insert(
            command.to_string(),
            json!({
                "counts": manifest.counts,
                "failures": manifest.failures,
                "partial": manifest.partial,
                "config_hash": manifest.config_hash,
            }),
        );
    }
    Ok(out)
}
