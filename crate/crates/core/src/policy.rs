//! Text-generation policies: an OpenAI-compatible HTTP client and a
//! deterministic scripted mock, behind one budget-aware contract.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::warn;

use crate::curator::Problem;
use crate::runtime::render_prompt;
use crate::tokens::{TokenCounter, WhitespaceTagCounter};
use crate::trajectory::{Segment, SegmentKind, TransitionCatalog, Trajectory, TrajectorySource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyRole {
    Agentic,
    Reasoning,
    Student,
}

/// Responses of a scripted policy for one problem. A list is indexed by the
/// request's sample number (cyclically).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponses {
    One(String),
    Many(Vec<String>),
}

impl ScriptedResponses {
    fn pick(&self, sample: u32) -> Option<&str> {
        match self {
            ScriptedResponses::One(s) => Some(s),
            ScriptedResponses::Many(v) if v.is_empty() => None,
            ScriptedResponses::Many(v) => Some(&v[sample as usize % v.len()]),
        }
    }
}

impl From<&str> for ScriptedResponses {
    fn from(s: &str) -> Self {
        ScriptedResponses::One(s.to_string())
    }
}

fn default_max_output_tokens() -> usize {
    32_768
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transport {
    Http {
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env: Option<String>,
        #[serde(default = "default_max_output_tokens")]
        max_output_tokens: usize,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
    },
    Scripted {
        #[serde(default)]
        responses: BTreeMap<String, ScriptedResponses>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHandle {
    pub name: String,
    pub role: PolicyRole,
    pub transport: Transport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Routing key for scripted policies; not sent over HTTP.
    #[serde(default)]
    pub problem_id: Option<String>,
    /// Sample number for multi-sample rollouts; not sent over HTTP.
    #[serde(default)]
    pub sample: u32,
    /// Text the assistant has already produced, for resumed generation.
    #[serde(default)]
    pub assistant_prefix: String,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            stop: Vec::new(),
            temperature: 0.0,
            seed: None,
            problem_id: None,
            sample: 0,
            assistant_prefix: String::new(),
        }
    }

    pub fn for_problem(mut self, id: impl Into<String>) -> Self {
        self.problem_id = Some(id.into());
        self
    }

    pub fn with_stop(mut self, stop: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.stop = stop.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_tokens < 1 {
            return Err(PolicyError::Budget(self.max_tokens));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(PolicyError::InvalidRequest("empty stop sequence".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(self.temperature >= 0.0) {
            return Err(PolicyError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    /// Cut at this stop sequence, which is not part of the text.
    Stop(String),
    Length,
    EndOfMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish: FinishReason,
    pub tokens_used: usize,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("max_tokens must be at least 1, got {0}")]
    Budget(usize),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("scripted policy {policy}: {message}")]
    Script { policy: String, message: String },
}

pub trait TextPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn role(&self) -> PolicyRole;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError>;

    /// Largest `max_tokens` the transport accepts; used for unbudgeted calls.
    fn max_output_tokens(&self) -> usize {
        usize::MAX
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << (attempt - 1).min(16))
    }
}

#[derive(Clone)]
pub struct ConnectOptions {
    pub retry: RetryPolicy,
    pub counter: Arc<dyn TokenCounter>,
    pub request_timeout: Duration,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            counter: Arc::new(WhitespaceTagCounter),
            request_timeout: Duration::from_secs(600),
        }
    }
}

impl PolicyHandle {
    pub fn scripted(
        name: impl Into<String>,
        role: PolicyRole,
        responses: impl IntoIterator<Item = (String, ScriptedResponses)>,
    ) -> Self {
        Self {
            name: name.into(),
            role,
            transport: Transport::Scripted {
                responses: responses.into_iter().collect(),
            },
        }
    }

    /// Builds the runtime policy behind this handle.
    pub fn connect(&self, options: &ConnectOptions) -> Result<Arc<dyn TextPolicy>, PolicyError> {
        match &self.transport {
            Transport::Scripted { responses } => Ok(Arc::new(ScriptedPolicy {
                name: self.name.clone(),
                role: self.role,
                responses: responses.clone(),
                counter: options.counter.clone(),
            })),
            Transport::Http {
                endpoint,
                model,
                auth_env,
                max_output_tokens,
                parallelism,
            } => {
                let client = reqwest::blocking::Client::builder()
                    .timeout(options.request_timeout)
                    .build()
                    .map_err(|e| PolicyError::Transport {
                        attempts: 0,
                        message: e.to_string(),
                    })?;
                Ok(Arc::new(HttpPolicy {
                    name: self.name.clone(),
                    role: self.role,
                    url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
                    model: model.clone(),
                    auth_env: auth_env.clone(),
                    max_output_tokens: *max_output_tokens,
                    client,
                    slots: Semaphore::new((*parallelism).max(1)),
                    retry: options.retry,
                    counter: options.counter.clone(),
                }))
            }
        }
    }
}

/// Deterministic policy replaying fixed responses keyed by problem id.
///
/// Resumed requests continue the scripted response after the assistant
/// prefix, ignoring any `<executor>` blocks the caller injected.
pub struct ScriptedPolicy {
    name: String,
    role: PolicyRole,
    responses: BTreeMap<String, ScriptedResponses>,
    counter: Arc<dyn TokenCounter>,
}

impl ScriptedPolicy {
    pub fn new(
        name: impl Into<String>,
        role: PolicyRole,
        responses: BTreeMap<String, ScriptedResponses>,
        counter: Arc<dyn TokenCounter>,
    ) -> Self {
        Self {
            name: name.into(),
            role,
            responses,
            counter,
        }
    }

    fn script_error(&self, message: impl Into<String>) -> PolicyError {
        PolicyError::Script {
            policy: self.name.clone(),
            message: message.into(),
        }
    }
}

fn strip_executor_blocks(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<executor>") {
        out.push_str(&rest[..start]);
        match rest[start..].find("</executor>") {
            Some(end) => rest = &rest[start + end + "</executor>".len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Cuts `text` at the earliest stop sequence and at the token budget.
pub fn apply_limits(text: &str, request: &GenerationRequest, counter: &dyn TokenCounter) -> GenerationResult {
    let stop_hit = request
        .stop
        .iter()
        .filter_map(|s| text.find(s.as_str()).map(|pos| (pos, s)))
        .min_by_key(|(pos, s)| (*pos, std::cmp::Reverse(s.len())));
    let (kept, consumed, finish) = match stop_hit {
        Some((pos, s)) => (&text[..pos], &text[..pos + s.len()], FinishReason::Stop(s.clone())),
        None => (text, text, FinishReason::EndOfMessage),
    };
    if counter.count(consumed) > request.max_tokens {
        let cut = counter.truncate(text, request.max_tokens);
        return GenerationResult {
            text: cut.to_string(),
            finish: FinishReason::Length,
            tokens_used: counter.count(cut).max(request.max_tokens),
        };
    }
    GenerationResult {
        text: kept.to_string(),
        finish,
        tokens_used: counter.count(kept),
    }
}

impl TextPolicy for ScriptedPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> PolicyRole {
        self.role
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError> {
        request.validate()?;
        let id = request
            .problem_id
            .as_deref()
            .ok_or_else(|| self.script_error("request carries no problem id"))?;
        let full = self
            .responses
            .get(id)
            .and_then(|r| r.pick(request.sample))
            .ok_or_else(|| self.script_error(format!("no response for problem `{id}`")))?;
        let produced = strip_executor_blocks(&request.assistant_prefix);
        let rest = full
            .strip_prefix(produced.as_str())
            .ok_or_else(|| self.script_error(format!("prefix diverges from script for `{id}`")))?;
        Ok(apply_limits(rest, request, self.counter.as_ref()))
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

/// Single-turn OpenAI-compatible chat-completions client.
pub struct HttpPolicy {
    name: String,
    role: PolicyRole,
    url: String,
    model: String,
    auth_env: Option<String>,
    max_output_tokens: usize,
    client: reqwest::blocking::Client,
    slots: Semaphore,
    retry: RetryPolicy,
    counter: Arc<dyn TokenCounter>,
}

enum Attempt {
    Done(GenerationResult),
    Retry(String),
    Fail(PolicyError),
}

impl HttpPolicy {
    pub fn request_body(&self, request: &GenerationRequest) -> Value {
        let mut messages = vec![json!({"role": "user", "content": request.prompt})];
        if !request.assistant_prefix.is_empty() {
            messages.push(json!({"role": "assistant", "content": request.assistant_prefix}));
        }
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_tokens.min(self.max_output_tokens),
            "temperature": request.temperature,
            "stop": request.stop,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if !request.assistant_prefix.is_empty() {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body
    }

    fn bearer(&self) -> Result<Option<String>, PolicyError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| PolicyError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    fn attempt(&self, body: &Value, token: Option<&str>, request: &GenerationRequest) -> Attempt {
        let mut call = self.client.post(&self.url).json(body);
        if let Some(token) = token {
            call = call.bearer_auth(token);
        }
        let response = match call.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Attempt::Fail(PolicyError::Auth(format!("endpoint returned {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("endpoint returned {status}"));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Attempt::Fail(PolicyError::Transport {
                attempts: 1,
                message: format!("endpoint returned {status}: {text}"),
            });
        }
        match response.json::<Value>() {
            Ok(v) => match self.interpret(&v, request) {
                Some(result) => Attempt::Done(result),
                None => Attempt::Retry(format!("malformed completion response: {v}")),
            },
            Err(e) => Attempt::Retry(e.to_string()),
        }
    }

    fn interpret(&self, v: &Value, request: &GenerationRequest) -> Option<GenerationResult> {
        let choice = v.get("choices")?.get(0)?;
        let content = choice
            .get("message")
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .unwrap_or_default();
        let finish_reason = choice.get("finish_reason").and_then(Value::as_str);
        let reported = v
            .get("usage")
            .and_then(|u| u.get("completion_tokens"))
            .and_then(Value::as_u64)
            .map(|n| n as usize);

        // servers that ignore `stop` still get a post-hoc cut
        if let Some((pos, s)) = request
            .stop
            .iter()
            .filter_map(|s| content.find(s.as_str()).map(|p| (p, s)))
            .min_by_key(|(p, _)| *p)
        {
            let text = content[..pos].to_string();
            let tokens_used = self.counter.count(&text);
            return Some(GenerationResult {
                text,
                finish: FinishReason::Stop(s.clone()),
                tokens_used,
            });
        }

        let text = content.to_string();
        let tokens_used = reported.unwrap_or_else(|| self.counter.count(&text));
        let finish = match finish_reason {
            Some("length") => FinishReason::Length,
            Some("stop") => stop_reason(choice, request)
                .or_else(|| inferred_stop(&request.assistant_prefix, &text, &request.stop))
                .map(FinishReason::Stop)
                .unwrap_or(FinishReason::EndOfMessage),
            _ => FinishReason::EndOfMessage,
        };
        Some(GenerationResult {
            text,
            finish,
            tokens_used,
        })
    }
}

/// vLLM reports the matched stop string in `stop_reason`.
fn stop_reason(choice: &Value, request: &GenerationRequest) -> Option<String> {
    let s = choice.get("stop_reason")?.as_str()?;
    request.stop.iter().find(|x| x.as_str() == s).cloned()
}

/// A closing-tag stop sequence whose opening tag is still open in the output
/// must be what ended generation.
fn inferred_stop(prefix: &str, text: &str, stops: &[String]) -> Option<String> {
    let full = format!("{prefix}{text}");
    stops
        .iter()
        .find(|s| {
            let Some(name) = s.strip_prefix("</") else {
                return false;
            };
            let open = format!("<{name}");
            match full.rfind(&open) {
                Some(o) => full.rfind(s.as_str()).is_none_or(|c| c < o),
                None => false,
            }
        })
        .cloned()
}

impl TextPolicy for HttpPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn role(&self) -> PolicyRole {
        self.role
    }

    fn max_output_tokens(&self) -> usize {
        self.max_output_tokens
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, PolicyError> {
        request.validate()?;
        let token = self.bearer()?;
        let body = self.request_body(request);
        let _permit = self.slots.acquire();
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body, token.as_deref(), request) {
                Attempt::Done(result) => return Ok(result),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(message) => {
                    warn!(policy = %self.name, attempt, %message, "transient generation failure");
                    last = message;
                    if attempt < attempts {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(PolicyError::Transport {
            attempts,
            message: last,
        })
    }
}

/// Inclusive range for the first teacher's random budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetRange {
    pub min: usize,
    pub max: usize,
}

impl Default for BudgetRange {
    fn default() -> Self {
        Self { min: 1024, max: 8192 }
    }
}

impl BudgetRange {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.min < 1 || self.min > self.max {
            return Err(PolicyError::InvalidRequest(format!(
                "budget range must satisfy 1 <= min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Uniform integer in the inclusive range.
pub fn draw_first_budget<R: Rng + ?Sized>(rng: &mut R, range: BudgetRange) -> Result<usize, PolicyError> {
    range.validate()?;
    Ok(rng.gen_range(range.min..=range.max))
}

/// Prompt for the second teacher. Depends on the problem only; the first
/// attempt is deliberately ignored.
pub fn second_teacher_prompt(template: &str, problem: &Problem, _first: &Trajectory) -> Result<String, crate::runtime::RuntimeError> {
    render_prompt(template, &problem.statement)
}

/// One entry of an OpenHands-style agent log. Known keys: `thought`, `code`,
/// `feedback`, `final_thought`.
pub type AgentLogEntry = serde_json::Map<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedLog {
    pub trajectory: Trajectory,
    /// Unknown fields and feedback without a preceding code block.
    pub warnings: usize,
}

/// Maps agent log fields onto segments: thought → think, code → code,
/// feedback → executor, final_thought → answer.
pub fn convert_agentic_log(problem_id: &str, log: &[AgentLogEntry]) -> ConvertedLog {
    const KNOWN: [&str; 4] = ["thought", "code", "feedback", "final_thought"];
    let mut segments: Vec<Segment> = Vec::new();
    let mut warnings = 0usize;
    for entry in log {
        warnings += entry.keys().filter(|k| !KNOWN.contains(&k.as_str())).count();
        for key in KNOWN {
            let Some(value) = entry.get(key) else { continue };
            let text = match value {
                Value::String(s) => s.clone(),
                Value::Null => continue,
                other => other.to_string(),
            };
            let kind = match key {
                "thought" => SegmentKind::Think,
                "code" => SegmentKind::Code,
                "feedback" => SegmentKind::Executor,
                _ => SegmentKind::Answer,
            };
            if kind == SegmentKind::Executor && segments.last().map(|s| s.kind) != Some(SegmentKind::Code) {
                warnings += 1;
                continue;
            }
            segments.push(Segment::new(kind, strip_tags(&text)));
        }
    }
    let mut trajectory = Trajectory::new(problem_id, TrajectorySource::AgenticTeacher, segments);
    crate::trajectory::mark_exec_errors(&mut trajectory);
    ConvertedLog { trajectory, warnings }
}

fn strip_tags(text: &str) -> String {
    crate::trajectory::TAG_LITERALS
        .iter()
        .fold(text.to_string(), |acc, tag| acc.replace(tag, ""))
}

/// Converts long chain-of-thought output: the reasoning block becomes a think
/// segment and everything outside it an answer segment.
pub fn convert_reasoning_output(problem_id: &str, text: &str, catalog: &TransitionCatalog) -> Trajectory {
    let trimmed = text.trim_start();
    let text = if trimmed.contains("</think>") && !trimmed.starts_with("<think>") {
        format!("<think>{trimmed}")
    } else {
        trimmed.to_string()
    };
    Trajectory::parse_with(problem_id, TrajectorySource::ReasoningTeacher, &text, catalog)
}

/// Converts raw policy output according to the policy's role.
pub fn output_to_trajectory(role: PolicyRole, problem_id: &str, text: &str, catalog: &TransitionCatalog) -> Trajectory {
    match role {
        PolicyRole::Reasoning => convert_reasoning_output(problem_id, text, catalog),
        PolicyRole::Agentic => {
            let mut t = Trajectory::parse_with(problem_id, TrajectorySource::AgenticTeacher, text, catalog);
            crate::trajectory::mark_exec_errors(&mut t);
            t
        }
        PolicyRole::Student => Trajectory::parse_with(problem_id, TrajectorySource::Student, text, catalog),
    }
}

/// Builds scripted responses from agent logs keyed by problem id.
pub fn scripted_from_agent_logs(
    logs: &BTreeMap<String, Vec<AgentLogEntry>>,
) -> (BTreeMap<String, ScriptedResponses>, usize) {
    let mut warnings = 0;
    let responses = logs
        .iter()
        .filter_map(|(id, log)| {
            let converted = convert_agentic_log(id, log);
            warnings += converted.warnings;
            converted
                .trajectory
                .serialize()
                .ok()
                .map(|text| (id.clone(), ScriptedResponses::One(text)))
        })
        .collect();
    (responses, warnings)
}
