//! Token accounting.
//!
//! The pipeline never depends on a model tokenizer. Every budget, context
//! limit and `Acc(b)` truncation goes through a [`TokenCounter`], so a real
//! tokenizer can be plugged in without touching the stages.

use crate::trajectory::TAG_LITERALS;

/// Counts tokens and truncates text to a token budget.
///
/// Implementations must satisfy, for all strings `a`, `b` and budgets `n`:
/// `count(a) <= count(a + b)`, `truncate(a, n)` is a prefix of `a`, and
/// `count(truncate(a, n)) <= n`.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` whose count does not exceed `budget`.
    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str;
}

/// Default counter: one token per maximal run of non-whitespace characters,
/// plus one token per occurrence of a trajectory tag literal.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTagCounter;

impl WhitespaceTagCounter {
    /// Walks the text once, calling `visit(byte_end, running_count)` after each
    /// character. Returns the final count.
    fn scan(text: &str, mut visit: impl FnMut(usize, usize) -> bool) -> usize {
        let mut count = 0usize;
        let mut in_run = false;
        for (idx, ch) in text.char_indices() {
            let end = idx + ch.len_utf8();
            if ch.is_whitespace() {
                in_run = false;
            } else {
                if !in_run {
                    count += 1;
                    in_run = true;
                }
                if ch == '>' && ends_with_tag(&text[..end]) {
                    count += 1;
                }
            }
            if !visit(end, count) {
                break;
            }
        }
        count
    }
}

fn ends_with_tag(prefix: &str) -> bool {
    TAG_LITERALS.iter().any(|tag| prefix.ends_with(tag))
}

impl TokenCounter for WhitespaceTagCounter {
    fn count(&self, text: &str) -> usize {
        Self::scan(text, |_, _| true)
    }

    fn truncate<'a>(&self, text: &'a str, budget: usize) -> &'a str {
        let mut cut = 0usize;
        let mut over = false;
        Self::scan(text, |end, count| {
            if count > budget {
                over = true;
                false
            } else {
                cut = end;
                true
            }
        });
        if over {
            &text[..cut]
        } else {
            text
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_runs_and_tags() {
        let c = WhitespaceTagCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("   "), 0);
        assert_eq!(c.count("hello world"), 2);
        // one run, two tag literals
        assert_eq!(c.count("<answer>42</answer>"), 3);
        assert_eq!(c.count("<think>a b</think>"), 4);
    }

    #[test]
    fn truncate_keeps_longest_prefix() {
        let c = WhitespaceTagCounter;
        assert_eq!(c.truncate("hello world again", 2), "hello world ");
        assert_eq!(c.truncate("hello world", 0), "");
        assert_eq!(c.truncate("hello world", 5), "hello world");
        assert_eq!(c.truncate("<answer>42</answer>", 2), "<answer>42</answer");
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        let c = WhitespaceTagCounter;
        let t = "αβγ δεζ ηθι";
        assert_eq!(c.truncate(t, 1), "αβγ ");
    }

    proptest! {
        #[test]
        fn count_is_monotone(a in "\\PC{0,40}", b in "\\PC{0,40}") {
            let c = WhitespaceTagCounter;
            let ab = a.clone() + &b;
            prop_assert!(c.count(&a) <= c.count(&ab));
        }

        #[test]
        fn truncate_is_sound(
            t in "(<think>|</think>|<code>|</code>|<answer>|</answer>| |x|yz|\n){0,30}",
            b in 0usize..20,
        ) {
            let c = WhitespaceTagCounter;
            let cut = c.truncate(&t, b);
            prop_assert!(t.starts_with(cut));
            prop_assert!(c.count(cut) <= b);
            if c.count(&t) > b {
                // count grows by at most one per character, so the cut is tight
                prop_assert_eq!(c.count(cut), b);
            }
        }
    }
}
