//! Tool-augmented inference loop and the accuracy-at-budget harness.
//!
//! Generation stops at `</code>`; the code block is executed, its feedback is
//! appended inside `<executor>…</executor>`, and generation resumes with the
//! whole accumulated text as context.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curator::Problem;
use crate::grader::acc_at_budget;
use crate::policy::{FinishReason, GenerationRequest, PolicyError, TextPolicy};
use crate::tokens::TokenCounter;
use crate::trajectory::{
    SegmentKind, TransitionCatalog, Trajectory, TrajectorySource, META_EXEC_ERROR, TAG_LITERALS,
};
use crate::util::parallel_map;

pub const PLACEHOLDER: &str = "{problem}";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Solve the following problem. Think inside <think></think>. \
You may run Python by writing it inside <code></code>; its output will be returned inside \
<executor></executor>. Put the final answer inside <answer></answer>.\n\nProblem: {problem}";

/// Host-side grace added to the execution timeout before a hard kill.
pub const KILL_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("prompt template must contain {{problem}} exactly once, found {0}")]
    Placeholder(usize),
    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Substitutes the problem statement into the template.
pub fn render_prompt(template: &str, statement: &str) -> Result<String, RuntimeError> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(template.replacen(PLACEHOLDER, statement, 1)),
        n => Err(RuntimeError::Placeholder(n)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub stdout: String,
    pub stderr: String,
    pub exit_status: i32,
    pub timed_out: bool,
    pub duration_ms: u64,
}

impl ExecResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            stdout: stdout.into(),
            stderr: String::new(),
            exit_status: 0,
            timed_out: false,
            duration_ms: 0,
        }
    }

    pub fn failed(exit_status: i32, stderr: impl Into<String>) -> Self {
        Self {
            stdout: String::new(),
            stderr: stderr.into(),
            exit_status,
            timed_out: false,
            duration_ms: 0,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.timed_out || self.exit_status != 0
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("executor unavailable: {0}")]
    Unavailable(String),
}

/// Host side of code execution.
pub trait Executor: Send + Sync {
    fn submit(&self, code: &str, timeout: Duration) -> Result<ExecResult, ExecutorError>;
}

/// In-process executor answering from a fixed code → result table.
#[derive(Debug, Clone, Default)]
pub struct StubExecutor {
    table: BTreeMap<String, ExecResult>,
}

impl StubExecutor {
    pub fn new(table: BTreeMap<String, ExecResult>) -> Self {
        Self { table }
    }

    pub fn with(mut self, code: impl Into<String>, result: ExecResult) -> Self {
        self.table.insert(code.into(), result);
        self
    }
}

impl Executor for StubExecutor {
    fn submit(&self, code: &str, timeout: Duration) -> Result<ExecResult, ExecutorError> {
        let mut result = self
            .table
            .get(code)
            .or_else(|| self.table.get(code.trim()))
            .cloned()
            .unwrap_or_else(|| ExecResult::failed(1, format!("stub executor has no entry for {code:?}")));
        let limit = timeout.as_millis() as u64;
        if result.timed_out || result.duration_ms > limit {
            result.timed_out = true;
            result.duration_ms = limit;
        }
        Ok(result)
    }
}

/// Spawns one process per execution speaking the JSON stdin/stdout protocol:
/// request `{"code", "timeout_s"}`, response
/// `{"stdout", "stderr", "exit_status", "timed_out", "duration_ms"}`.
/// The process is killed once `timeout + KILL_GRACE` has elapsed.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    pub command: Vec<String>,
}

impl ProcessExecutor {
    pub fn new(command: Vec<String>) -> Self {
        Self { command }
    }
}

#[derive(Serialize)]
struct ExecRequest<'a> {
    code: &'a str,
    timeout_s: f64,
}

impl Executor for ProcessExecutor {
    fn submit(&self, code: &str, timeout: Duration) -> Result<ExecResult, ExecutorError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| ExecutorError::Unavailable("empty executor command".into()))?;
        let started = Instant::now();
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ExecutorError::Unavailable(format!("{program}: {e}")))?;

        let request = serde_json::to_vec(&ExecRequest {
            code,
            timeout_s: timeout.as_secs_f64(),
        })
        .expect("request serializes");
        if let Some(mut stdin) = child.stdin.take() {
            // off-thread so a child that never reads cannot block the deadline;
            // a shim that exits early closes the pipe and the result says why
            std::thread::spawn(move || {
                let _ = stdin.write_all(&request);
            });
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });

        let deadline = timeout + KILL_GRACE;
        let killed = loop {
            match child.try_wait() {
                Ok(Some(_)) => break false,
                Ok(None) if started.elapsed() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break true;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(ExecutorError::Unavailable(e.to_string())),
            }
        };
        let elapsed = started.elapsed().as_millis() as u64;
        if killed {
            return Ok(ExecResult {
                stdout: String::new(),
                stderr: "killed by host after deadline".into(),
                exit_status: -9,
                timed_out: true,
                duration_ms: elapsed,
            });
        }
        let raw = reader.join().unwrap_or_default();
        Ok(serde_json::from_slice(&raw).unwrap_or_else(|e| ExecResult {
            stdout: String::new(),
            stderr: format!("protocol error: {e}"),
            exit_status: -1,
            timed_out: false,
            duration_ms: elapsed,
        }))
    }
}

fn duration_secs(d: &Duration) -> f64 {
    d.as_secs_f64()
}

mod duration_secs_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(duration_secs(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolLoopConfig {
    pub max_tool_calls: usize,
    #[serde(rename = "exec_timeout_s", with = "duration_secs_serde")]
    pub exec_timeout: Duration,
    pub total_token_budget: usize,
    pub prompt_template: String,
    /// Maximum characters of stderr shown to the model.
    pub stderr_limit: usize,
    pub temperature: f64,
}

impl Default for ToolLoopConfig {
    fn default() -> Self {
        Self {
            max_tool_calls: 10,
            exec_timeout: Duration::from_secs(3),
            total_token_budget: 32_768,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            stderr_limit: 2048,
            temperature: 0.0,
        }
    }
}

impl ToolLoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.exec_timeout.is_zero() {
            return Err("exec_timeout_s: must be > 0".into());
        }
        if self.total_token_budget < 1 {
            return Err("total_token_budget: must be >= 1".into());
        }
        render_prompt(&self.prompt_template, "").map_err(|e| format!("prompt_template: {e}"))?;
        Ok(())
    }
}

/// Feedback text injected into the `<executor>` block.
pub fn format_feedback(result: &ExecResult, timeout: Duration, stderr_limit: usize) -> String {
    let text = if result.timed_out {
        format!("[timeout after {}s]", timeout.as_secs_f64())
    } else if result.exit_status != 0 {
        let stderr: String = result.stderr.chars().take(stderr_limit).collect();
        if stderr.trim().is_empty() {
            format!("[error] exit status {}", result.exit_status)
        } else {
            format!("[error] {stderr}")
        }
    } else {
        result.stdout.clone()
    };
    escape_tags(&text)
}

/// Whether executor feedback reports a failed or timed-out run.
pub fn is_failure_feedback(text: &str) -> bool {
    text.starts_with("[error]") || text.starts_with("[timeout after")
}

fn escape_tags(text: &str) -> String {
    TAG_LITERALS
        .iter()
        .fold(text.to_string(), |acc, tag| acc.replace(tag, &tag.replace('<', "&lt;")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Answer,
    Budget,
    ToolLimit,
    PolicyEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub trajectory: Trajectory,
    /// The assistant text exactly as accumulated during the episode.
    pub text: String,
    pub tool_calls_used: usize,
    pub tokens_used: usize,
    pub terminated_by: Termination,
}

/// Runs one tool-augmented episode.
pub fn run_agent(
    problem: &Problem,
    policy: &dyn TextPolicy,
    executor: &dyn Executor,
    cfg: &ToolLoopConfig,
    counter: &dyn TokenCounter,
    catalog: &TransitionCatalog,
    seed: Option<u64>,
) -> Result<EpisodeTrace, RuntimeError> {
    let prompt = render_prompt(&cfg.prompt_template, &problem.statement)?;
    let budget = cfg.total_token_budget;
    let mut text = String::new();
    let mut failures: Vec<bool> = Vec::new();

    let terminated_by = loop {
        let used = counter.count(&text);
        if used >= budget {
            break Termination::Budget;
        }
        let mut request = GenerationRequest::new(prompt.clone(), budget - used)
            .for_problem(problem.id.clone())
            .with_stop(["</code>"])
            .with_temperature(cfg.temperature);
        request.seed = seed;
        request.assistant_prefix = text.clone();
        let out = policy.generate(&request)?;

        // executor blocks come from the host only
        if let Some(pos) = out.text.find("<executor>") {
            text.push_str(&out.text[..pos]);
            break Termination::PolicyEnd;
        }
        text.push_str(&out.text);

        match out.finish {
            FinishReason::Stop(ref s) if s == "</code>" => {
                let open = text.rfind("<code>").filter(|&i| text.rfind("</code>").is_none_or(|j| j < i));
                let code = open.map(|i| text[i + "<code>".len()..].to_string());
                text.push_str("</code>");
                // a stray close, or a block holding other tags, is not a tool call
                let Some(code) = code.filter(|c| !TAG_LITERALS.iter().any(|t| c.contains(t))) else {
                    break Termination::PolicyEnd;
                };
                if failures.len() >= cfg.max_tool_calls {
                    break Termination::ToolLimit;
                }
                let result = executor
                    .submit(&code, cfg.exec_timeout)
                    .map_err(|e| RuntimeError::ExecutorUnavailable(e.to_string()))?;
                failures.push(result.is_failure());
                text.push_str("<executor>");
                text.push_str(&format_feedback(&result, cfg.exec_timeout, cfg.stderr_limit));
                text.push_str("</executor>");
            }
            FinishReason::Length => break Termination::Budget,
            _ if text.contains("</answer>") => break Termination::Answer,
            _ => break Termination::PolicyEnd,
        }
    };

    let mut trajectory = Trajectory::parse_with(problem.id.clone(), TrajectorySource::Student, &text, catalog);
    let mut failed = failures.iter();
    for i in 1..trajectory.segments.len() {
        if trajectory.segments[i].kind == SegmentKind::Executor
            && trajectory.segments[i - 1].kind == SegmentKind::Code
            && failed.next() == Some(&true)
        {
            trajectory.segments[i - 1]
                .meta
                .insert(META_EXEC_ERROR.to_string(), "true".to_string());
        }
    }
    Ok(EpisodeTrace {
        tool_calls_used: failures.len(),
        tokens_used: counter.count(&text),
        trajectory,
        text,
        terminated_by,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub tool_rate: f64,
}

impl BudgetRow {
    pub fn exact_accuracy(&self) -> Option<Ratio<usize>> {
        (self.n > 0).then(|| Ratio::new(self.correct, self.n))
    }
}

/// Per-problem evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub problem_id: String,
    pub text: Option<String>,
    pub tool_calls_used: usize,
    pub tokens_used: usize,
    pub terminated_by: Option<Termination>,
    /// Grade per budget, in the order of the report rows.
    pub grades: Vec<u8>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<BudgetRow>,
    pub traces: Vec<EvalTrace>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["budget", "accuracy", "n", "tool_rate"])?;
        for row in &self.rows {
            w.write_record([
                row.budget.to_string(),
                format!("{:.6}", row.accuracy),
                row.n.to_string(),
                format!("{:.6}", row.tool_rate),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct EvalSetup<'a> {
    pub policy: &'a dyn TextPolicy,
    pub executor: &'a dyn Executor,
    pub tool_loop: &'a ToolLoopConfig,
    pub counter: &'a dyn TokenCounter,
    pub catalog: &'a TransitionCatalog,
    pub parallelism: usize,
    pub seed: Option<u64>,
}

/// Runs each problem once under the largest budget and grades the trace at
/// every budget.
pub fn evaluate(problems: &[Problem], setup: &EvalSetup<'_>, budgets: &[usize]) -> Result<EvalReport, String> {
    let max_budget = *budgets.iter().max().ok_or("budgets must be non-empty")?;
    let cfg = ToolLoopConfig {
        total_token_budget: max_budget,
        ..setup.tool_loop.clone()
    };
    let traces = parallel_map(problems, setup.parallelism, |problem| {
        match run_agent(problem, setup.policy, setup.executor, &cfg, setup.counter, setup.catalog, setup.seed) {
            Ok(trace) => {
                let serialized = trace.trajectory.serialize().unwrap_or_else(|_| trace.text.clone());
                let grades = budgets
                    .iter()
                    .map(|&b| acc_at_budget(&serialized, &problem.answer, b, setup.counter))
                    .collect();
                EvalTrace {
                    problem_id: problem.id.clone(),
                    text: Some(serialized),
                    tool_calls_used: trace.tool_calls_used,
                    tokens_used: trace.tokens_used,
                    terminated_by: Some(trace.terminated_by),
                    grades,
                    error: None,
                }
            }
            Err(e) => EvalTrace {
                problem_id: problem.id.clone(),
                text: None,
                tool_calls_used: 0,
                tokens_used: 0,
                terminated_by: None,
                grades: vec![0; budgets.len()],
                error: Some(e.to_string()),
            },
        }
    });

    let n = traces.len();
    let with_tools = traces.iter().filter(|t| t.tool_calls_used > 0).count();
    let tool_rate = if n == 0 { 0.0 } else { with_tools as f64 / n as f64 };
    let rows = budgets
        .iter()
        .enumerate()
        .map(|(i, &budget)| {
            let correct = traces.iter().map(|t| t.grades[i] as usize).sum();
            BudgetRow {
                budget,
                accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
                correct,
                n,
                tool_rate,
            }
        })
        .collect();
    Ok(EvalReport { rows, traces })
}

/// Fraction of traces containing at least one executor segment.
pub fn tool_invocation_rate<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Option<Ratio<usize>> {
    let (mut total, mut with_tools) = (0usize, 0usize);
    for t in trajectories {
        total += 1;
        if t.count_kind(SegmentKind::Executor) > 0 {
            with_tools += 1;
        }
    }
    (total > 0).then(|| Ratio::new(with_tools, total))
}

/// Shared handle to an executor.
pub type SharedExecutor = Arc<dyn Executor>;
