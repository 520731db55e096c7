//! Pipeline configuration: one TOML file, `${VAR}` interpolation in string
//! values, defaults for every field.
//!
//! ```toml
//! seed = 7
//! parallelism = 4
//!
//! [policies.agentic]
//! role = "agentic"
//! kind = "http"
//! endpoint = "http://localhost:8000/v1"
//! model = "agent"
//! auth_env = "AGENT_API_KEY"
//!
//! [policies.reasoning]
//! role = "reasoning"
//! kind = "scripted"
//! responses_file = "fixtures/reasoning.json"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{BudgetRange, PolicyHandle, PolicyRole, ScriptedResponses, Transport};
use crate::runtime::{ExecResult, Executor, ProcessExecutor, StubExecutor, ToolLoopConfig};
use crate::selfdistill::{BufferConfig, Threshold, VerificationMode};
use crate::trainprep::ContextLimits;
use crate::trajectory::{TransitionCatalog, TransitionKind};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    /// A field path followed by what is wrong with it.
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

/// A named policy. Scripted policies may load their responses from a JSON
/// object file (problem id → response or list of responses), resolved
/// relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDef {
    pub role: PolicyRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses_file: Option<PathBuf>,
    #[serde(flatten)]
    pub transport: Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub standard: usize,
    pub large: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            standard: 4096,
            large: 32_768,
        }
    }
}

impl Budgets {
    pub fn as_vec(&self) -> Vec<usize> {
        vec![self.standard, self.large]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExecutorConfig {
    /// In-process table of code → result.
    Stub {
        #[serde(default)]
        table: BTreeMap<String, ExecResult>,
    },
    /// One process per execution speaking the JSON stdin/stdout protocol.
    Process { command: Vec<String> },
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig::Stub { table: BTreeMap::new() }
    }
}

impl ExecutorConfig {
    pub fn build(&self) -> Box<dyn Executor> {
        match self {
            ExecutorConfig::Stub { table } => Box::new(StubExecutor::new(table.clone())),
            ExecutorConfig::Process { command } => Box::new(ProcessExecutor::new(command.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub policies: BTreeMap<String, PolicyDef>,
    /// Policy evaluated by `eval`.
    pub eval_policy: String,
    pub l0_range: BudgetRange,
    /// Student rollouts per problem.
    #[serde(alias = "K")]
    pub k: usize,
    pub beta1: Threshold,
    pub beta2: Threshold,
    pub teacher_retries: usize,
    pub verification: VerificationMode,
    /// Show the first attempt to the second teacher during composition.
    pub include_first_attempt: bool,
    pub teacher_temperature: f64,
    pub sampling_temperature: f64,
    /// Run student rollouts through the tool loop.
    pub rollout_tools: bool,
    pub probe_budget: usize,
    pub budgets: Budgets,
    pub context_limits: ContextLimits,
    /// Overrides of the default transition sentences.
    pub transitions: BTreeMap<TransitionKind, String>,
    pub tool_loop: ToolLoopConfig,
    pub executor: ExecutorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let buffer = BufferConfig::default();
        Self {
            seed: 0,
            parallelism: 1,
            policies: BTreeMap::new(),
            eval_policy: "student".into(),
            l0_range: BudgetRange::default(),
            k: 16,
            beta1: buffer.beta1,
            beta2: buffer.beta2,
            teacher_retries: buffer.teacher_retries,
            verification: buffer.verification,
            include_first_attempt: false,
            teacher_temperature: 0.6,
            sampling_temperature: 0.6,
            rollout_tools: true,
            probe_budget: 4096,
            budgets: Budgets::default(),
            context_limits: ContextLimits::default(),
            transitions: BTreeMap::new(),
            tool_loop: ToolLoopConfig::default(),
            executor: ExecutorConfig::default(),
        }
    }
}

fn interpolate(value: &mut toml::Value, path: &str, re: &Regex) -> Result<(), ConfigError> {
    match value {
        toml::Value::String(s) => {
            let mut missing = None;
            let replaced = re.replace_all(s, |caps: &regex::Captures<'_>| {
                std::env::var(&caps[1]).unwrap_or_else(|_| {
                    missing.get_or_insert_with(|| caps[1].to_string());
                    String::new()
                })
            });
            if let Some(var) = missing {
                return Err(invalid(path, format!("environment variable {var} is not set")));
            }
            *s = replaced.into_owned();
        }
        toml::Value::Array(items) => {
            for (i, item) in items.iter_mut().enumerate() {
                interpolate(item, &format!("{path}[{i}]"), re)?;
            }
        }
        toml::Value::Table(table) => {
            for (key, item) in table.iter_mut() {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                interpolate(item, &child, re)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text. Relative `responses_file` paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut raw: toml::Value = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex");
        interpolate(&mut raw, "", &re)?;
        let mut config: PipelineConfig = raw.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.load_response_files(base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn load_response_files(&mut self, base: &Path) -> Result<(), ConfigError> {
        for (name, def) in &mut self.policies {
            let Some(file) = def.responses_file.take() else { continue };
            let field = format!("policies.{name}.responses_file");
            let Transport::Scripted { responses } = &mut def.transport else {
                return Err(invalid(field, "only scripted policies take a responses file"));
            };
            let path = base.join(&file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| invalid(&field, format!("{}: {e}", path.display())))?;
            let loaded: BTreeMap<String, ScriptedResponses> =
                serde_json::from_str(&text).map_err(|e| invalid(&field, format!("{}: {e}", path.display())))?;
            for (id, r) in loaded {
                responses.entry(id).or_insert(r);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be >= 1"));
        }
        if self.l0_range.min == 0 || self.l0_range.min > self.l0_range.max {
            return Err(invalid("l0_range", "need 1 <= min <= max"));
        }
        if self.k == 0 {
            return Err(invalid("k", "must be >= 1"));
        }
        if self.beta1 >= self.beta2 {
            return Err(invalid("beta1", format!("must be below beta2 ({})", self.beta2)));
        }
        for (path, t) in [
            ("teacher_temperature", self.teacher_temperature),
            ("sampling_temperature", self.sampling_temperature),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(invalid(path, "must be a finite value >= 0"));
            }
        }
        for (path, n) in [
            ("probe_budget", self.probe_budget),
            ("budgets.standard", self.budgets.standard),
            ("budgets.large", self.budgets.large),
            ("context_limits.teacher", self.context_limits.teacher),
            ("context_limits.selfdistill", self.context_limits.selfdistill),
        ] {
            if n == 0 {
                return Err(invalid(path, "must be >= 1"));
            }
        }
        self.tool_loop.validate().map_err(|e| invalid("tool_loop", e))?;
        self.catalog().map_err(|e| invalid("transitions", e.to_string()))?;
        if let ExecutorConfig::Process { command } = &self.executor {
            if command.is_empty() {
                return Err(invalid("executor.command", "must be non-empty"));
            }
        }
        for (name, def) in &self.policies {
            if let Transport::Http {
                endpoint,
                model,
                parallelism,
                max_output_tokens,
                ..
            } = &def.transport
            {
                let field = |f: &str| format!("policies.{name}.{f}");
                if endpoint.trim().is_empty() {
                    return Err(invalid(field("endpoint"), "must be non-empty"));
                }
                if model.trim().is_empty() {
                    return Err(invalid(field("model"), "must be non-empty"));
                }
                if *parallelism == 0 {
                    return Err(invalid(field("parallelism"), "must be >= 1"));
                }
                if *max_output_tokens == 0 {
                    return Err(invalid(field("max_output_tokens"), "must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// The policy of that name, or `policies.<name>: undefined`.
    pub fn policy(&self, name: &str) -> Result<PolicyHandle, ConfigError> {
        let def = self
            .policies
            .get(name)
            .ok_or_else(|| invalid(format!("policies.{name}"), "undefined"))?;
        Ok(PolicyHandle {
            name: name.to_string(),
            role: def.role,
            transport: def.transport.clone(),
        })
    }

    pub fn catalog(&self) -> Result<TransitionCatalog, crate::trajectory::TrajectoryError> {
        TransitionCatalog::with_overrides(&self.transitions)
    }

    pub fn buffer_config(&self) -> BufferConfig {
        BufferConfig {
            beta1: self.beta1.clone(),
            beta2: self.beta2.clone(),
            teacher_retries: self.teacher_retries,
            verification: self.verification,
            prompt_template: self.tool_loop.prompt_template.clone(),
            temperature: self.teacher_temperature,
            seed: self.seed,
            parallelism: self.parallelism,
        }
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&canonical)
    }
}
