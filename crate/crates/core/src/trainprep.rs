//! Training records with loss-mask spans.
//!
//! Masks are half-open character spans (Unicode scalar indices) over the
//! serialized trajectory text; an external trainer maps them onto its own
//! tokenization. Three regions are masked:
//!
//! 1. everything before the first wrong-to-right transition (the failed
//!    attempt; the transition itself stays trained),
//! 2. every executor block,
//! 3. every code block whose execution failed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::composer::{CompositionCase, OutcomeRecord};
use crate::selfdistill::{EntryKind, EntryRecord};
use crate::tokens::TokenCounter;
use crate::trajectory::{
    mark_exec_errors, serialize_with_ranges, SegmentKind, TransitionCatalog, Trajectory, TrajectoryError,
    TrajectorySource, META_EXEC_ERROR,
};
use crate::util::{to_jsonl, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
}

impl Serialize for MaskSpan {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&self.start)?;
        t.serialize_element(&self.end)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for MaskSpan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (start, end) = <(usize, usize)>::deserialize(d)?;
        Ok(MaskSpan { start, end })
    }
}

impl MaskSpan {
    pub fn contains(&self, start: usize, end: usize) -> bool {
        self.start <= start && end <= self.end
    }
}

/// Sorted, disjoint, non-adjacent union of the ranges.
fn merge(mut ranges: Vec<(usize, usize)>) -> Vec<MaskSpan> {
    ranges.retain(|(s, e)| s < e);
    ranges.sort_unstable();
    let mut out: Vec<MaskSpan> = Vec::new();
    for (start, end) in ranges {
        match out.last_mut() {
            Some(last) if start <= last.end => last.end = last.end.max(end),
            _ => out.push(MaskSpan { start, end }),
        }
    }
    out
}

/// Loss-mask spans of a trajectory over its serialized text.
pub fn mask_spans(t: &Trajectory) -> Result<Vec<MaskSpan>, TrajectoryError> {
    let (_, ranges) = serialize_with_ranges(t)?;
    let mut masked = Vec::new();
    let first_switch = t
        .segments
        .iter()
        .position(|s| s.transition_kind().is_some_and(|k| k.is_wrong_to_right()));
    if let Some(i) = first_switch {
        masked.push((0, ranges[i].start));
    }
    for (seg, range) in t.segments.iter().zip(&ranges) {
        let hidden = match seg.kind {
            SegmentKind::Executor => true,
            SegmentKind::Code => seg.flag(META_EXEC_ERROR),
            _ => false,
        };
        if hidden {
            masked.push((range.start, range.end));
        }
    }
    Ok(merge(masked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStage {
    Teacher,
    SelfDistill,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub problem_id: String,
    pub stage: RecordStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<CompositionCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EntryKind>,
}

impl RecordMeta {
    fn label(&self) -> &'static str {
        match (self.case, self.kind) {
            (Some(c), _) => c.as_str(),
            (None, Some(EntryKind::Verification)) => "Verification",
            (None, Some(EntryKind::Correction)) => "Correction",
            (None, None) => "Unlabeled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub text: String,
    pub mask_spans: Vec<MaskSpan>,
    pub token_count: usize,
    pub meta: RecordMeta,
}

impl TrainingRecord {
    pub fn from_trajectory(
        id: impl Into<String>,
        t: &Trajectory,
        meta: RecordMeta,
        counter: &dyn TokenCounter,
    ) -> Result<Self, TrajectoryError> {
        let text = t.serialize()?;
        Ok(Self {
            id: id.into(),
            mask_spans: mask_spans(t)?,
            token_count: counter.count(&text),
            text,
            meta,
        })
    }
}

/// Keeps records with `token_count <= max_tokens`; returns the drop count.
pub fn context_filter(records: Vec<TrainingRecord>, max_tokens: usize) -> (Vec<TrainingRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records.into_iter().filter(|r| r.token_count <= max_tokens).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLimits {
    pub teacher: usize,
    pub selfdistill: usize,
}

impl Default for ContextLimits {
    fn default() -> Self {
        Self {
            teacher: 16_384,
            selfdistill: 8_192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPrepRun {
    pub records: Vec<TrainingRecord>,
    /// Emitted records per composition case / entry kind.
    pub stats: BTreeMap<String, usize>,
    pub dropped_teacher: usize,
    pub dropped_selfdistill: usize,
}

fn zeroed_stats() -> BTreeMap<String, usize> {
    ["CorrectedBySecond", "BothCorrect", "FirstOnly", "Verification", "Correction"]
        .into_iter()
        .map(|k| (k.to_string(), 0))
        .collect()
}

fn parse_record_text(problem_id: &str, text: &str, catalog: &TransitionCatalog) -> Trajectory {
    let mut t = Trajectory::parse_with(problem_id, TrajectorySource::Composed, text, catalog);
    mark_exec_errors(&mut t);
    t
}

/// Turns composition outcomes and self-distillation entries into filtered
/// training records. Discarded outcomes produce nothing.
pub fn prepare(
    outcomes: &[OutcomeRecord],
    entries: &[EntryRecord],
    limits: ContextLimits,
    catalog: &TransitionCatalog,
    counter: &dyn TokenCounter,
) -> Result<TrainPrepRun, TrajectoryError> {
    let mut teacher = Vec::new();
    for o in outcomes {
        let Some(text) = &o.composed_text else { continue };
        let t = parse_record_text(&o.problem_id, text, catalog);
        let meta = RecordMeta {
            problem_id: o.problem_id.clone(),
            stage: RecordStage::Teacher,
            case: Some(o.case),
            kind: None,
        };
        teacher.push(TrainingRecord::from_trajectory(o.problem_id.clone(), &t, meta, counter)?);
    }
    let mut selfdistill = Vec::new();
    for e in entries {
        let t = parse_record_text(&e.problem_id, &e.composed_text, catalog);
        let suffix = match e.kind {
            EntryKind::Verification => "verification",
            EntryKind::Correction => "correction",
        };
        let meta = RecordMeta {
            problem_id: e.problem_id.clone(),
            stage: RecordStage::SelfDistill,
            case: None,
            kind: Some(e.kind),
        };
        selfdistill.push(TrainingRecord::from_trajectory(
            format!("{}:{suffix}", e.problem_id),
            &t,
            meta,
            counter,
        )?);
    }

    let (mut records, dropped_teacher) = context_filter(teacher, limits.teacher);
    let (kept_sd, dropped_selfdistill) = context_filter(selfdistill, limits.selfdistill);
    records.extend(kept_sd);

    let mut stats = zeroed_stats();
    for r in &records {
        *stats.entry(r.meta.label().to_string()).or_default() += 1;
    }
    Ok(TrainPrepRun {
        records,
        stats,
        dropped_teacher,
        dropped_selfdistill,
    })
}

/// Writes the records as JSONL and the per-case counts as a JSON sidecar.
pub fn emit_records(run: &TrainPrepRun, records_path: &Path, stats_path: &Path) -> std::io::Result<()> {
    let lines = to_jsonl(&run.records).map_err(std::io::Error::other)?;
    write_atomic(records_path, &lines)?;
    let mut stats = serde_json::to_vec_pretty(&run.stats).map_err(std::io::Error::other)?;
    stats.push(b'\n');
    write_atomic(stats_path, &stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::WhitespaceTagCounter;
    use crate::trajectory::{Segment, TransitionKind};

    fn traj(segments: Vec<Segment>) -> Trajectory {
        Trajectory::new("p", TrajectorySource::Composed, segments)
    }

    #[test]
    fn plain_trajectory_has_no_spans() {
        let t = traj(vec![Segment::think("a"), Segment::answer("1")]);
        assert!(mask_spans(&t).unwrap().is_empty());
    }

    #[test]
    fn wrong_to_right_masks_first_attempt() {
        let catalog = TransitionCatalog::default();
        let y1 = traj(vec![Segment::think("a"), Segment::answer("2")]);
        let y2 = traj(vec![Segment::think("b"), Segment::answer("1")]);
        let mut segs = y1.segments.clone();
        segs.push(catalog.segment(TransitionKind::WrongToRightR2A).unwrap());
        segs.extend(y2.segments);
        let spans = mask_spans(&traj(segs)).unwrap();
        let y1_len = y1.serialize().unwrap().chars().count();
        assert_eq!(spans, vec![MaskSpan { start: 0, end: y1_len }]);
    }

    #[test]
    fn right_to_right_keeps_first_attempt() {
        let catalog = TransitionCatalog::default();
        let segs = vec![
            Segment::answer("1"),
            catalog.segment(TransitionKind::RightToRightA2R).unwrap(),
            Segment::answer("1"),
        ];
        assert!(mask_spans(&traj(segs)).unwrap().is_empty());
    }

    #[test]
    fn failed_code_and_feedback_merge() {
        let t = traj(vec![
            Segment::think("t"),
            Segment::code("1/0").with_meta(META_EXEC_ERROR, "true"),
            Segment::executor("[error] ZeroDivisionError"),
            Segment::code("print(1)"),
            Segment::executor("1"),
        ]);
        let (text, _) = serialize_with_ranges(&t).unwrap();
        // independent offsets from the text itself
        let code_start = text.find("<code>1/0").unwrap();
        let exec_end = text.find("</executor>").unwrap() + "</executor>".len();
        let second_exec = text.rfind("<executor>").unwrap();
        assert_eq!(
            mask_spans(&t).unwrap(),
            vec![
                MaskSpan { start: code_start, end: exec_end },
                MaskSpan { start: second_exec, end: text.len() },
            ]
        );
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let rec = |n| TrainingRecord {
            id: "x".into(),
            text: String::new(),
            mask_spans: vec![],
            token_count: n,
            meta: RecordMeta {
                problem_id: "x".into(),
                stage: RecordStage::Teacher,
                case: None,
                kind: None,
            },
        };
        let (kept, dropped) = context_filter(vec![rec(16_384), rec(16_385)], 16_384);
        assert_eq!((kept.len(), dropped), (1, 1));
        assert_eq!(kept[0].token_count, 16_384);
    }

    #[test]
    fn record_json_shape() {
        let t = traj(vec![Segment::code("c"), Segment::executor("o")]);
        let meta = RecordMeta {
            problem_id: "p".into(),
            stage: RecordStage::Teacher,
            case: Some(CompositionCase::FirstOnly),
            kind: None,
        };
        let r = TrainingRecord::from_trajectory("p", &t, meta, &WhitespaceTagCounter).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["id", "mask_spans", "meta", "text", "token_count"]);
        assert_eq!(v["mask_spans"], serde_json::json!([[14, 36]]));
        assert_eq!(v["meta"]["case"], "FirstOnly");
    }

    #[test]
    fn empty_input_zeroed_stats() {
        let run = prepare(&[], &[], ContextLimits::default(), &TransitionCatalog::default(), &WhitespaceTagCounter)
            .unwrap();
        assert!(run.records.is_empty());
        assert!(run.stats.values().all(|&n| n == 0));
        assert_eq!(run.stats.len(), 5);
    }
}
