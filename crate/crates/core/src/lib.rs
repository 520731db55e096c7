//! Strategy distillation for math reasoning: composing agentic (tool-using)
//! and pure-reasoning teacher trajectories into single training sequences,
//! self-distilling the student, and evaluating accuracy under token budgets.
//!
//! Trajectories are tagged text (`<think>`, `<code>`, `<executor>`,
//! `<answer>` plus bare transition sentences); see [`trajectory`].

pub mod composer;
pub mod config;
pub mod curator;
pub mod grader;
pub mod pipeline;
pub mod policy;
pub mod runtime;
pub mod selfdistill;
pub mod tokens;
pub mod trainprep;
pub mod trajectory;
pub mod util;

pub use composer::{compose_dataset, compose_pair, ComposeConfig, CompositionCase, CompositionOutcome};
pub use curator::{curate, CurateConfig, Problem};
pub use grader::{acc_at_budget, grade, grade_text, math_equal, normalize_answer, GradeReport};
pub use policy::{GenerationRequest, GenerationResult, PolicyHandle, ScriptedPolicy, TextPolicy};
pub use runtime::{evaluate, run_agent, Executor, ProcessExecutor, StubExecutor, ToolLoopConfig};
pub use selfdistill::{build_buffer, sample_and_grade, BufferConfig, EntryKind, Threshold};
pub use tokens::{TokenCounter, WhitespaceTagCounter};
pub use trainprep::{context_filter, mask_spans, MaskSpan, TrainingRecord};
pub use trajectory::{Segment, SegmentKind, Trajectory, TransitionCatalog, TransitionKind};
