//! Trajectory data model and the tagged text format.
//!
//! A trajectory is an ordered list of segments. On the wire each segment is
//! written as `<tag>payload</tag>`, except transition segments, which are
//! written as bare sentences between blocks:
//!
//! ```text
//! <think>x</think>Wait, using text reasoning is too tedious, let us try code reasoning.<think>y</think>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every opening and closing tag literal of the format.
pub const TAG_LITERALS: [&str; 8] = [
    "<think>",
    "</think>",
    "<code>",
    "</code>",
    "<executor>",
    "</executor>",
    "<answer>",
    "</answer>",
];

pub const META_TRUNCATED: &str = "truncated";
pub const META_MALFORMED: &str = "malformed";
pub const META_EXEC_ERROR: &str = "exec_error";
pub const META_TRANSITION_KIND: &str = "transition_kind";
/// Set by the parser on an executor block that does not follow a code block.
pub const META_ORPHAN: &str = "orphan";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentKind {
    Think,
    Code,
    Executor,
    Answer,
    Transition,
}

impl SegmentKind {
    /// Tag name for taggable kinds; `None` for transitions.
    pub fn tag(self) -> Option<&'static str> {
        match self {
            SegmentKind::Think => Some("think"),
            SegmentKind::Code => Some("code"),
            SegmentKind::Executor => Some("executor"),
            SegmentKind::Answer => Some("answer"),
            SegmentKind::Transition => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn think(text: impl Into<String>) -> Self {
        Self::new(SegmentKind::Think, text)
    }

    pub fn code(text: impl Into<String>) -> Self {
        Self::new(SegmentKind::Code, text)
    }

    pub fn executor(text: impl Into<String>) -> Self {
        Self::new(SegmentKind::Executor, text)
    }

    pub fn answer(text: impl Into<String>) -> Self {
        Self::new(SegmentKind::Answer, text)
    }

    /// A transition segment carrying the catalog text for `kind`.
    pub fn transition(kind: TransitionKind, text: impl Into<String>) -> Self {
        Self::new(SegmentKind::Transition, text).with_meta(META_TRANSITION_KIND, kind.as_str())
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn flag(&self, key: &str) -> bool {
        self.meta.get(key).map(String::as_str) == Some("true")
    }

    pub fn transition_kind(&self) -> Option<TransitionKind> {
        if self.kind != SegmentKind::Transition {
            return None;
        }
        self.meta
            .get(META_TRANSITION_KIND)
            .and_then(|k| k.parse().ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrajectorySource {
    AgenticTeacher,
    ReasoningTeacher,
    Student,
    Composed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem_id: String,
    pub source: TrajectorySource,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("segment {index} ({kind:?}) contains the tag literal {tag}")]
    EmbeddedTag {
        index: usize,
        kind: SegmentKind,
        tag: &'static str,
    },
    #[error("executor segment {index} does not follow a code segment")]
    OrphanExecutor { index: usize },
    #[error("transition segment {index} has no valid transition_kind")]
    UntypedTransition { index: usize },
    #[error("transition catalog has no template for {0}")]
    MissingTemplate(TransitionKind),
    #[error("transition template for {0} is empty")]
    EmptyTemplate(TransitionKind),
}

impl Trajectory {
    pub fn new(problem_id: impl Into<String>, source: TrajectorySource, segments: Vec<Segment>) -> Self {
        Self {
            problem_id: problem_id.into(),
            source,
            segments,
        }
    }

    /// Parses tagged text with the default transition catalog.
    pub fn parse(problem_id: impl Into<String>, source: TrajectorySource, text: &str) -> Self {
        Self::new(problem_id, source, parse_segments(text, &TransitionCatalog::default()))
    }

    pub fn parse_with(
        problem_id: impl Into<String>,
        source: TrajectorySource,
        text: &str,
        catalog: &TransitionCatalog,
    ) -> Self {
        Self::new(problem_id, source, parse_segments(text, catalog))
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Checks every structural invariant of the model.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        for (index, seg) in self.segments.iter().enumerate() {
            check_payload(index, seg)?;
            match seg.kind {
                SegmentKind::Executor => {
                    let after_code = index > 0 && self.segments[index - 1].kind == SegmentKind::Code;
                    if !after_code {
                        return Err(TrajectoryError::OrphanExecutor { index });
                    }
                }
                SegmentKind::Transition if seg.transition_kind().is_none() => {
                    return Err(TrajectoryError::UntypedTransition { index });
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<String, TrajectoryError> {
        serialize_trajectory(self)
    }

    /// Concatenation `self ⊕ other`, keeping `self`'s identity.
    pub fn concat(&self, other: &Trajectory) -> Trajectory {
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().cloned());
        Trajectory::new(self.problem_id.clone(), self.source, segments)
    }

    pub fn count_kind(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).count()
    }
}

fn check_payload(index: usize, seg: &Segment) -> Result<(), TrajectoryError> {
    match TAG_LITERALS.iter().find(|tag| seg.text.contains(*tag)) {
        Some(tag) => Err(TrajectoryError::EmbeddedTag {
            index,
            kind: seg.kind,
            tag,
        }),
        None => Ok(()),
    }
}

/// Strategy switches inserted between two attempts.
///
/// Composition uses the direction-specific wrong-to-right / right-to-right
/// kinds (`A2R`: agentic attempt first, `R2A`: reasoning attempt first);
/// self-distillation uses `SelfVerify` and `SelfCorrect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransitionKind {
    #[serde(rename = "WrongToRight_A2R")]
    WrongToRightA2R,
    #[serde(rename = "WrongToRight_R2A")]
    WrongToRightR2A,
    #[serde(rename = "RightToRight_A2R")]
    RightToRightA2R,
    #[serde(rename = "RightToRight_R2A")]
    RightToRightR2A,
    SelfVerify,
    SelfCorrect,
}

impl TransitionKind {
    pub const ALL: [TransitionKind; 6] = [
        TransitionKind::WrongToRightA2R,
        TransitionKind::WrongToRightR2A,
        TransitionKind::RightToRightA2R,
        TransitionKind::RightToRightR2A,
        TransitionKind::SelfVerify,
        TransitionKind::SelfCorrect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransitionKind::WrongToRightA2R => "WrongToRight_A2R",
            TransitionKind::WrongToRightR2A => "WrongToRight_R2A",
            TransitionKind::RightToRightA2R => "RightToRight_A2R",
            TransitionKind::RightToRightR2A => "RightToRight_R2A",
            TransitionKind::SelfVerify => "SelfVerify",
            TransitionKind::SelfCorrect => "SelfCorrect",
        }
    }

    /// Whether the transition follows a failed attempt. Everything before such
    /// a transition is excluded from the training loss.
    pub fn is_wrong_to_right(self) -> bool {
        matches!(
            self,
            TransitionKind::WrongToRightA2R | TransitionKind::WrongToRightR2A | TransitionKind::SelfCorrect
        )
    }
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TransitionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransitionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown transition kind `{s}`"))
    }
}

/// Transition kind → sentence. The defaults are placeholders meant to be
/// overridden from the pipeline config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransitionCatalog {
    templates: BTreeMap<TransitionKind, String>,
}

impl Default for TransitionCatalog {
    fn default() -> Self {
        use TransitionKind::*;
        let templates = [
            (
                WrongToRightA2R,
                "Wait, the code-based approach seems to have gone wrong, let us reason through the problem in text instead.",
            ),
            (
                WrongToRightR2A,
                "Wait, using text reasoning is too tedious, let us try code reasoning.",
            ),
            (
                RightToRightA2R,
                "Let us double-check this result by reasoning through the problem in text.",
            ),
            (
                RightToRightR2A,
                "Let us double-check this result by writing some code.",
            ),
            (
                SelfVerify,
                "Let me verify this answer with another careful solution.",
            ),
            (
                SelfCorrect,
                "Wait, this answer may be wrong, let me solve the problem again carefully.",
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect();
        Self { templates }
    }
}

impl TransitionCatalog {
    /// Builds a catalog from explicit templates; every kind must be present
    /// and non-empty.
    pub fn from_templates(templates: BTreeMap<TransitionKind, String>) -> Result<Self, TrajectoryError> {
        let catalog = Self { templates };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Defaults overlaid with the given templates.
    pub fn with_overrides(overrides: &BTreeMap<TransitionKind, String>) -> Result<Self, TrajectoryError> {
        let mut catalog = Self::default();
        for (k, v) in overrides {
            catalog.templates.insert(*k, v.clone());
        }
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        for kind in TransitionKind::ALL {
            let text = self.templates.get(&kind).ok_or(TrajectoryError::MissingTemplate(kind))?;
            if text.is_empty() {
                return Err(TrajectoryError::EmptyTemplate(kind));
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: TransitionKind) -> Option<&str> {
        self.templates.get(&kind).map(String::as_str)
    }

    pub fn segment(&self, kind: TransitionKind) -> Result<Segment, TrajectoryError> {
        transition_text(kind, self).map(|text| Segment::transition(kind, text))
    }

    fn iter(&self) -> impl Iterator<Item = (TransitionKind, &str)> {
        self.templates.iter().map(|(k, v)| (*k, v.as_str()))
    }
}

/// The catalog template for `kind`, verbatim.
pub fn transition_text(kind: TransitionKind, catalog: &TransitionCatalog) -> Result<String, TrajectoryError> {
    match catalog.get(kind) {
        Some("") => Err(TrajectoryError::EmptyTemplate(kind)),
        Some(text) => Ok(text.to_string()),
        None => Err(TrajectoryError::MissingTemplate(kind)),
    }
}

/// Serializes a trajectory to tagged text.
pub fn serialize_trajectory(t: &Trajectory) -> Result<String, TrajectoryError> {
    serialize_with_ranges(t).map(|(text, _)| text)
}

/// Serializes a trajectory and reports, per segment, its character range
/// (Unicode scalar indices) in the output, tags included.
pub fn serialize_with_ranges(t: &Trajectory) -> Result<(String, Vec<Range<usize>>), TrajectoryError> {
    let mut out = String::new();
    let mut ranges = Vec::with_capacity(t.segments.len());
    let mut pos = 0usize;
    for (index, seg) in t.segments.iter().enumerate() {
        check_payload(index, seg)?;
        let start = pos;
        match seg.kind.tag() {
            Some(tag) => {
                let piece = format!("<{tag}>{}</{tag}>", seg.text);
                pos += piece.chars().count();
                out.push_str(&piece);
            }
            None => {
                pos += seg.text.chars().count();
                out.push_str(&seg.text);
            }
        }
        ranges.push(start..pos);
    }
    Ok((out, ranges))
}

/// Parses tagged text with the default catalog. Never fails.
pub fn parse_trajectory(text: &str) -> Vec<Segment> {
    parse_segments(text, &TransitionCatalog::default())
}

enum Tag {
    Open(SegmentKind),
    Close(SegmentKind),
}

/// Finds the next tag literal at or after byte `from`.
fn next_tag(text: &str, from: usize) -> Option<(usize, usize, Tag)> {
    let mut search = from;
    while let Some(rel) = text[search..].find('<') {
        let at = search + rel;
        let rest = &text[at..];
        for kind in [SegmentKind::Think, SegmentKind::Code, SegmentKind::Executor, SegmentKind::Answer] {
            let name = kind.tag().unwrap_or_default();
            let body = &rest[1..];
            if let Some(after) = body.strip_prefix(name) {
                if after.starts_with('>') {
                    return Some((at, at + name.len() + 2, Tag::Open(kind)));
                }
            } else if let Some(after) = body.strip_prefix('/').and_then(|b| b.strip_prefix(name)) {
                if after.starts_with('>') {
                    return Some((at, at + name.len() + 3, Tag::Close(kind)));
                }
            }
        }
        search = at + 1;
    }
    None
}

/// Greedy left-to-right parse.
///
/// * Text inside a matched tag pair becomes a segment of that kind.
/// * Bare text made entirely of catalog sentences becomes transition
///   segments; other non-whitespace bare text becomes a trimmed answer
///   segment; whitespace-only bare text is dropped.
/// * An unclosed trailing block is kept and flagged `truncated`.
/// * An opening tag (or a foreign closing tag) inside an open block closes
///   it implicitly and flags it `malformed`. Stray closing tags are dropped.
/// * An executor block not preceded by a code block is kept and flagged
///   `orphan`.
pub fn parse_segments(text: &str, catalog: &TransitionCatalog) -> Vec<Segment> {
    let mut segments: Vec<Segment> = Vec::new();
    let mut open: Option<(SegmentKind, usize)> = None;
    let mut cursor = 0usize;

    let push_block = |segments: &mut Vec<Segment>, kind: SegmentKind, body: &str, flag: Option<&str>| {
        let mut seg = Segment::new(kind, body);
        if let Some(flag) = flag {
            seg.meta.insert(flag.to_string(), "true".to_string());
        }
        if kind == SegmentKind::Executor && segments.last().map(|s| s.kind) != Some(SegmentKind::Code) {
            seg.meta.insert(META_ORPHAN.to_string(), "true".to_string());
        }
        segments.push(seg);
    };

    while let Some((start, end, tag)) = next_tag(text, cursor) {
        match (open, tag) {
            (None, Tag::Open(kind)) => {
                push_bare(&mut segments, &text[cursor..start], catalog);
                open = Some((kind, end));
            }
            (None, Tag::Close(_)) => {
                push_bare(&mut segments, &text[cursor..start], catalog);
            }
            (Some((kind, body_start)), Tag::Close(close)) if close == kind => {
                push_block(&mut segments, kind, &text[body_start..start], None);
                open = None;
            }
            (Some((kind, body_start)), Tag::Close(_)) => {
                push_block(&mut segments, kind, &text[body_start..start], Some(META_MALFORMED));
                open = None;
            }
            (Some((kind, body_start)), Tag::Open(next)) => {
                push_block(&mut segments, kind, &text[body_start..start], Some(META_MALFORMED));
                open = Some((next, end));
            }
        }
        cursor = end;
    }

    match open {
        Some((kind, body_start)) => push_block(&mut segments, kind, &text[body_start..], Some(META_TRUNCATED)),
        None => push_bare(&mut segments, &text[cursor..], catalog),
    }
    segments
}

fn push_bare(segments: &mut Vec<Segment>, bare: &str, catalog: &TransitionCatalog) {
    if bare.trim().is_empty() {
        return;
    }
    if let Some(transitions) = split_transitions(bare, catalog) {
        segments.extend(transitions);
    } else {
        segments.push(Segment::answer(bare.trim()));
    }
}

/// Decomposes `bare` into a sequence of catalog sentences, if it is exactly
/// one. Longest template first at each position.
fn split_transitions(bare: &str, catalog: &TransitionCatalog) -> Option<Vec<Segment>> {
    let mut templates: Vec<(TransitionKind, &str)> = catalog.iter().filter(|(_, t)| !t.is_empty()).collect();
    templates.sort_by_key(|(_, t)| std::cmp::Reverse(t.len()));
    let mut rest = bare;
    let mut out = Vec::new();
    while !rest.is_empty() {
        let (kind, template) = templates.iter().find(|(_, t)| rest.starts_with(t))?;
        out.push(Segment::transition(*kind, *template));
        rest = &rest[template.len()..];
    }
    Some(out)
}

/// The last executor or answer segment, if any.
pub fn final_block(t: &Trajectory) -> Option<(SegmentKind, &str)> {
    final_segment(&t.segments).map(|s| (s.kind, s.text.as_str()))
}

pub(crate) fn final_segment(segments: &[Segment]) -> Option<&Segment> {
    segments
        .iter()
        .rev()
        .find(|s| matches!(s.kind, SegmentKind::Executor | SegmentKind::Answer))
}

/// Flags each code segment whose following executor feedback reports a
/// failure (`[error]` or `[timeout` prefix) with `exec_error = true`.
pub fn mark_exec_errors(t: &mut Trajectory) {
    for i in 1..t.segments.len() {
        let failed = {
            let (code, exec) = (&t.segments[i - 1], &t.segments[i]);
            code.kind == SegmentKind::Code
                && exec.kind == SegmentKind::Executor
                && crate::runtime::is_failure_feedback(&exec.text)
        };
        if failed {
            t.segments[i - 1]
                .meta
                .insert(META_EXEC_ERROR.to_string(), "true".to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(segs: &[Segment]) -> Vec<SegmentKind> {
        segs.iter().map(|s| s.kind).collect()
    }

    #[test]
    fn parses_direct_tags() {
        let segs = parse_trajectory("<think>a</think><answer>42</answer>");
        assert_eq!(segs, vec![Segment::think("a"), Segment::answer("42")]);
    }

    #[test]
    fn executor_after_code() {
        let segs = parse_trajectory("<code>print(1)</code><executor>1</executor>");
        assert_eq!(kinds(&segs), vec![SegmentKind::Code, SegmentKind::Executor]);
        assert!(!segs[1].flag(META_ORPHAN));
    }

    #[test]
    fn unclosed_tail_is_truncated() {
        let segs = parse_trajectory("<think>unclosed");
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].text, "unclosed");
        assert!(segs[0].flag(META_TRUNCATED));
    }

    #[test]
    fn nested_open_closes_implicitly() {
        let segs = parse_trajectory("<think>a<code>b</code>");
        assert_eq!(kinds(&segs), vec![SegmentKind::Think, SegmentKind::Code]);
        assert!(segs[0].flag(META_MALFORMED));
        assert!(!segs[1].flag(META_MALFORMED));
    }

    #[test]
    fn mismatched_close_and_stray_close() {
        let segs = parse_trajectory("</think>x<think>a</answer>");
        assert_eq!(segs[0], Segment::answer("x"));
        assert_eq!(segs[1].kind, SegmentKind::Think);
        assert!(segs[1].flag(META_MALFORMED));
    }

    #[test]
    fn bare_text_outside_tags() {
        let segs = parse_trajectory("  \n<think>a</think>\n\n The answer is 5. ");
        assert_eq!(segs, vec![Segment::think("a"), Segment::answer("The answer is 5.")]);
    }

    #[test]
    fn orphan_executor_is_flagged() {
        let segs = parse_trajectory("<executor>1</executor>");
        assert!(segs[0].flag(META_ORPHAN));
        let t = Trajectory::new("p", TrajectorySource::Student, segs);
        assert_eq!(t.validate(), Err(TrajectoryError::OrphanExecutor { index: 0 }));
    }

    #[test]
    fn serializes_answer() {
        let t = Trajectory::new("p", TrajectorySource::Student, vec![Segment::answer("7")]);
        assert_eq!(t.serialize().unwrap(), "<answer>7</answer>");
    }

    #[test]
    fn serializes_transition_bare() {
        let catalog = TransitionCatalog::default();
        let t = Trajectory::new(
            "p",
            TrajectorySource::Composed,
            vec![
                Segment::think("x"),
                catalog.segment(TransitionKind::WrongToRightR2A).unwrap(),
                Segment::think("y"),
            ],
        );
        let text = t.serialize().unwrap();
        assert_eq!(
            text,
            "<think>x</think>Wait, using text reasoning is too tedious, let us try code reasoning.<think>y</think>"
        );
        assert_eq!(parse_trajectory(&text), t.segments);
    }

    #[test]
    fn adjacent_transitions_round_trip() {
        let catalog = TransitionCatalog::default();
        let segs = vec![
            catalog.segment(TransitionKind::SelfVerify).unwrap(),
            catalog.segment(TransitionKind::SelfCorrect).unwrap(),
        ];
        let t = Trajectory::new("p", TrajectorySource::Composed, segs.clone());
        assert_eq!(parse_trajectory(&t.serialize().unwrap()), segs);
    }

    #[test]
    fn serialize_rejects_embedded_tags() {
        let t = Trajectory::new("p", TrajectorySource::Student, vec![Segment::think("a</think>b")]);
        assert!(matches!(t.serialize(), Err(TrajectoryError::EmbeddedTag { index: 0, .. })));
    }

    #[test]
    fn ranges_use_char_indices() {
        let t = Trajectory::new(
            "p",
            TrajectorySource::Student,
            vec![Segment::think("αβ"), Segment::answer("1")],
        );
        let (text, ranges) = serialize_with_ranges(&t).unwrap();
        assert_eq!(ranges, vec![0..17, 17..35]);
        assert_eq!(text.chars().count(), 35);
    }

    #[test]
    fn final_block_cases() {
        let t = |segs| Trajectory::new("p", TrajectorySource::Student, segs);
        assert_eq!(
            final_block(&t(vec![Segment::think("a"), Segment::answer("5"), Segment::think("b")])),
            Some((SegmentKind::Answer, "5"))
        );
        assert_eq!(final_block(&t(vec![Segment::think("a")])), None);
        assert_eq!(
            final_block(&t(vec![Segment::code("c"), Segment::executor("12"), Segment::answer("12")])),
            Some((SegmentKind::Answer, "12"))
        );
    }

    #[test]
    fn final_block_over_all_kind_pairs() {
        let all = [
            SegmentKind::Think,
            SegmentKind::Code,
            SegmentKind::Executor,
            SegmentKind::Answer,
            SegmentKind::Transition,
        ];
        for a in all {
            for b in all {
                let segs = vec![Segment::new(a, "first"), Segment::new(b, "second")];
                let t = Trajectory::new("p", TrajectorySource::Student, segs);
                let terminal = |k| matches!(k, SegmentKind::Executor | SegmentKind::Answer);
                let expected = if terminal(b) {
                    Some((b, "second"))
                } else if terminal(a) {
                    Some((a, "first"))
                } else {
                    None
                };
                assert_eq!(final_block(&t), expected, "{a:?},{b:?}");
            }
        }
    }

    #[test]
    fn transition_catalog_lookup() {
        let catalog = TransitionCatalog::default();
        assert_eq!(
            transition_text(TransitionKind::WrongToRightR2A, &catalog).unwrap(),
            "Wait, using text reasoning is too tedious, let us try code reasoning."
        );
        let custom = TransitionCatalog::with_overrides(&[(TransitionKind::SelfVerify, "V".to_string())].into())
            .unwrap();
        assert_eq!(transition_text(TransitionKind::SelfVerify, &custom).unwrap(), "V");
        let texts: std::collections::BTreeSet<_> = TransitionKind::ALL
            .iter()
            .map(|k| transition_text(*k, &catalog).unwrap())
            .collect();
        assert_eq!(texts.len(), 6);
        assert!(texts.iter().all(|t| !t.is_empty()));
    }

    #[test]
    fn incomplete_catalog_is_rejected() {
        let partial = [(TransitionKind::SelfVerify, "V".to_string())].into();
        assert_eq!(
            TransitionCatalog::from_templates(partial),
            Err(TrajectoryError::MissingTemplate(TransitionKind::WrongToRightA2R))
        );
        let empty = [(TransitionKind::SelfVerify, String::new())].into();
        assert!(TransitionCatalog::with_overrides(&empty).is_err());
    }

    #[test]
    fn marks_failed_code_blocks() {
        let mut t = Trajectory::parse(
            "p",
            TrajectorySource::Student,
            "<code>a</code><executor>[error] boom</executor><code>b</code><executor>ok</executor>",
        );
        mark_exec_errors(&mut t);
        assert!(t.segments[0].flag(META_EXEC_ERROR));
        assert!(!t.segments[2].flag(META_EXEC_ERROR));
    }
}
