//! Binary answer grading.
//!
//! Two stages: an exact check of the final executor/answer block, then a
//! fuzzy scan of the whole output for boxed answers, "answer is X" phrases and
//! the last numeric literal. Numeric answers compare as exact rationals.

use std::sync::OnceLock;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::tokens::TokenCounter;
use crate::trajectory::{self, Trajectory, TrajectorySource, META_TRUNCATED};

/// Largest decimal exponent accepted in scientific notation. Larger values
/// stay textual instead of expanding into huge integers.
const MAX_EXPONENT: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradeStage {
    ExactMatch,
    FuzzyMatch,
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeReport {
    pub grade: u8,
    pub stage: GradeStage,
    pub candidate: Option<String>,
}

impl GradeReport {
    fn matched(stage: GradeStage, candidate: &str) -> Self {
        Self {
            grade: 1,
            stage,
            candidate: Some(candidate.to_string()),
        }
    }

    fn no_match() -> Self {
        Self {
            grade: 0,
            stage: GradeStage::NoMatch,
            candidate: None,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.grade == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NormalizedAnswer {
    /// Lowest terms, positive denominator.
    Rational(BigRational),
    /// `unscaled / 10^scale`, as written.
    Decimal { unscaled: BigInt, scale: u32 },
    /// Lowercase, whitespace-collapsed, wrapper-free.
    Text(String),
}

impl NormalizedAnswer {
    pub fn as_rational(&self) -> Option<BigRational> {
        match self {
            NormalizedAnswer::Rational(r) => Some(r.clone()),
            NormalizedAnswer::Decimal { unscaled, scale } => {
                Some(BigRational::new(unscaled.clone(), pow10(*scale)))
            }
            NormalizedAnswer::Text(_) => None,
        }
    }

    /// The value as an integer, if it is numeric and integral.
    pub fn as_integer(&self) -> Option<BigInt> {
        self.as_rational().filter(|r| r.is_integer()).map(|r| r.to_integer())
    }
}

fn pow10(exp: u32) -> BigInt {
    num_traits::pow(BigInt::from(10u32), exp as usize)
}

/// Mathematical equality of two normalized answers.
pub fn math_equal(a: &NormalizedAnswer, b: &NormalizedAnswer) -> bool {
    match (a, b) {
        (NormalizedAnswer::Text(x), NormalizedAnswer::Text(y)) => x == y,
        (NormalizedAnswer::Text(_), _) | (_, NormalizedAnswer::Text(_)) => false,
        _ => a.as_rational() == b.as_rational(),
    }
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

/// Canonical form of a raw answer string. Never fails: anything that is not
/// a recognizable number becomes [`NormalizedAnswer::Text`].
pub fn normalize_answer(raw: &str) -> NormalizedAnswer {
    let s = strip_wrappers(raw);
    match parse_number(&s) {
        Some(n) => n,
        None => NormalizedAnswer::Text(canonical_text(&s)),
    }
}

fn strip_wrappers(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    if let Some(inner) = boxed_payloads(&s).pop() {
        s = inner;
    }
    for (from, to) in [
        ("\\left", ""),
        ("\\right", ""),
        ("{,}", ""),
        ("\\!", ""),
        ("\\,", " "),
        ("\\;", " "),
        ("\\ ", " "),
        ("\\(", ""),
        ("\\)", ""),
        ("\\[", ""),
        ("\\]", ""),
        ("\\dfrac", "\\frac"),
        ("\\tfrac", "\\frac"),
        ("$", ""),
    ] {
        s = s.replace(from, to);
    }
    static TEXT_CMD: OnceLock<Regex> = OnceLock::new();
    let text_cmd = regex(&TEXT_CMD, r"\\(?:text|mathrm|textbf|mathbf|mbox)\{([^{}]*)\}");
    s = text_cmd.replace_all(&s, "$1").into_owned();

    static ASSIGN: OnceLock<Regex> = OnceLock::new();
    let assign = regex(&ASSIGN, r"^\s*[A-Za-z]\s*=\s*(.+)$");
    if let Some(c) = assign.captures(&s) {
        s = c[1].to_string();
    }

    loop {
        // a leading '.' belongs to the number (".5")
        let trimmed = s
            .trim()
            .trim_end_matches(['.', ',', ';', ':', '?'])
            .trim_start_matches([',', ';', ':', '?'])
            .trim();
        let unbraced = trimmed
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .filter(|inner| braces_balanced(inner))
            .unwrap_or(trimmed);
        if unbraced == s {
            return s;
        }
        s = unbraced.to_string();
    }
}

fn braces_balanced(s: &str) -> bool {
    let mut depth = 0i32;
    for c in s.chars() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn canonical_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn parse_int(s: &str) -> Option<BigInt> {
    static INT: OnceLock<Regex> = OnceLock::new();
    let int = regex(&INT, r"^[+-]?\d+$");
    if int.is_match(s) {
        s.trim_start_matches('+').parse().ok()
    } else {
        None
    }
}

fn parse_number(s: &str) -> Option<NormalizedAnswer> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    static GROUPED: OnceLock<Regex> = OnceLock::new();
    let grouped = regex(&GROUPED, r"^[+-]?\d{1,3}(?:,\d{3})+(?:\.\d+)?$");
    let compact = if grouped.is_match(&compact) {
        compact.replace(',', "")
    } else {
        compact
    };

    if let Some(n) = parse_int(&compact) {
        return Some(NormalizedAnswer::Rational(BigRational::from_integer(n)));
    }

    static DECIMAL: OnceLock<Regex> = OnceLock::new();
    let decimal = regex(&DECIMAL, r"^([+-]?)(\d*)\.(\d+)$");
    if let Some(c) = decimal.captures(&compact) {
        let digits = format!("{}{}{}", &c[1], &c[2], &c[3]);
        let unscaled: BigInt = digits.trim_start_matches('+').parse().ok()?;
        return Some(NormalizedAnswer::Decimal {
            unscaled,
            scale: c[3].len() as u32,
        });
    }

    static SCI: OnceLock<Regex> = OnceLock::new();
    let sci = regex(
        &SCI,
        r"^([+-]?)(\d+(?:\.\d*)?|\.\d+)(?:[eE]|\\times10\^|\\cdot10\^)\{?([+-]?\d+)\}?$",
    );
    if let Some(c) = sci.captures(&compact) {
        let (int_part, frac_part) = c[2].split_once('.').unwrap_or((&c[2], ""));
        let mantissa: BigInt = format!("{}{}{}", &c[1], int_part, frac_part)
            .trim_start_matches('+')
            .parse()
            .ok()?;
        let exp: i64 = c[3].parse().ok()?;
        let exp = exp - frac_part.len() as i64;
        if exp.unsigned_abs() > MAX_EXPONENT as u64 {
            return None;
        }
        let value = if exp >= 0 {
            BigRational::from_integer(mantissa * pow10(exp as u32))
        } else {
            BigRational::new(mantissa, pow10((-exp) as u32))
        };
        return Some(NormalizedAnswer::Rational(value));
    }

    static FRAC: OnceLock<Regex> = OnceLock::new();
    let frac = regex(&FRAC, r"^([+-]?)\\frac\{([+-]?\d+)\}\{([+-]?\d+)\}$");
    static SLASH: OnceLock<Regex> = OnceLock::new();
    let slash = regex(&SLASH, r"^([+-]?)\(?([+-]?\d+)\)?/\(?([+-]?\d+)\)?$");
    let parts = frac.captures(&compact).or_else(|| slash.captures(&compact))?;
    let num = parse_int(&parts[2])?;
    let den = parse_int(&parts[3])?;
    if den.is_zero() {
        return None;
    }
    let value = BigRational::new(num, den);
    let value = if &parts[1] == "-" { -value } else { value };
    Some(NormalizedAnswer::Rational(value))
}

/// Payloads of every `\boxed{…}` / `\fbox{…}` with balanced braces, in order.
fn boxed_payloads(text: &str) -> Vec<String> {
    boxed_spans(text).into_iter().map(|(_, s)| s).collect()
}

fn boxed_spans(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    for marker in ["\\boxed{", "\\fbox{"] {
        let mut from = 0;
        while let Some(rel) = text[from..].find(marker) {
            let start = from + rel;
            let body = start + marker.len();
            let mut depth = 1usize;
            let mut end = None;
            for (i, c) in text[body..].char_indices() {
                match c {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(body + i);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            if let Some(end) = end {
                out.push((start, text[body..end].to_string()));
            }
            from = body;
        }
    }
    out.sort_by_key(|(pos, _)| *pos);
    out
}

/// Candidate answer spans of the fuzzy stage, each with its byte position.
fn fuzzy_candidates(text: &str) -> Vec<(usize, String)> {
    let mut candidates = boxed_spans(text);

    static ANSWER_IS: OnceLock<Regex> = OnceLock::new();
    let answer_is = regex(
        &ANSWER_IS,
        r"(?i)answer\s*(?:is|=|:)\s*:?\s*(\$[^$]+\$|\\boxed\{[^{}]*(?:\{[^{}]*\}[^{}]*)*\}|\S+)",
    );
    for c in answer_is.captures_iter(text) {
        let m = c.get(1).expect("group");
        candidates.push((m.start(), m.as_str().to_string()));
    }

    static NUMERIC: OnceLock<Regex> = OnceLock::new();
    let numeric = regex(
        &NUMERIC,
        r"-?\d{1,3}(?:,\d{3})+(?:\.\d+)?|-?\d+/\d+|-?(?:\d+\.\d+|\.\d+|\d+)(?:[eE][-+]?\d+)?",
    );
    if let Some(m) = numeric.find_iter(text).last() {
        candidates.push((m.start(), m.as_str().to_string()));
    }

    candidates.sort_by_key(|c| std::cmp::Reverse(c.0));
    candidates
}

/// Grades a trajectory against a reference answer.
pub fn grade(t: &Trajectory, gold: &str) -> GradeReport {
    let gold = normalize_answer(gold);

    if let Some(last) = trajectory::final_segment(&t.segments) {
        // an unclosed final block is unfinished output, not a committed answer
        if !last.flag(META_TRUNCATED) && math_equal(&normalize_answer(&last.text), &gold) {
            return GradeReport::matched(GradeStage::ExactMatch, &last.text);
        }
    }

    let full = t.serialize().unwrap_or_else(|_| {
        t.segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    });
    fuzzy_candidates(&full)
        .into_iter()
        .find(|(_, span)| math_equal(&normalize_answer(span), &gold))
        .map(|(_, span)| GradeReport::matched(GradeStage::FuzzyMatch, &span))
        .unwrap_or_else(GradeReport::no_match)
}

/// Grades raw tagged output.
pub fn grade_text(text: &str, gold: &str) -> GradeReport {
    grade(&Trajectory::parse("", TrajectorySource::Student, text), gold)
}

/// Accuracy at budget: the grade of the output truncated to `budget` tokens.
pub fn acc_at_budget(text: &str, gold: &str, budget: usize, counter: &dyn TokenCounter) -> u8 {
    grade_text(counter.truncate(text, budget), gold).grade
}

impl std::fmt::Display for NormalizedAnswer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormalizedAnswer::Rational(r) if r.denom().is_one() => write!(f, "{}", r.numer()),
            NormalizedAnswer::Rational(r) => write!(f, "{}/{}", r.numer(), r.denom()),
            NormalizedAnswer::Decimal { unscaled, scale } => {
                let digits = unscaled.abs().to_string();
                let scale = *scale as usize;
                let padded = format!("{digits:0>width$}", width = scale + 1);
                let (int, frac) = padded.split_at(padded.len() - scale);
                let sign = if unscaled.is_negative() { "-" } else { "" };
                write!(f, "{sign}{int}.{frac}")
            }
            NormalizedAnswer::Text(t) => f.write_str(t),
        }
    }
}
