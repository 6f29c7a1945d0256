//! Adjacent-repetition spans and their classification against a reference.
//!
//! A repetition of length `n` is a maximal stretch of the hypothesis with
//! period `n` that holds at least two whole copies of its period. Only
//! primitive periods count, so `bababa` is one bigram repeat and never a
//! four-gram one. The reported span is the longest whole-period suffix of
//! the stretch.

use serde::{Deserialize, Serialize};

use super::align::{Alignment, EditOp};

pub const NGRAM_SIZES: [usize; 3] = [4, 3, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatKind {
    /// The span occurs in the reference but fewer times in a row.
    ValidRepeat,
    /// The span is absent from the reference and overlaps substituted text.
    SubstituteRepeat,
    /// The span is absent from the reference and replaces nothing.
    InsertRepeat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub span: String,
    pub n: usize,
    pub kind: RepeatKind,
    /// Character offset of the repeated block in the hypothesis.
    pub start: usize,
    pub hyp_count: usize,
    pub ref_count: usize,
}

struct Block {
    g: Vec<char>,
    start: usize,
    count: usize,
}

impl Block {
    fn end(&self) -> usize {
        self.start + self.count * self.g.len()
    }
}

fn is_primitive(g: &[char]) -> bool {
    let n = g.len();
    (1..n).filter(|p| n % p == 0).all(|p| (p..n).any(|i| g[i] != g[i - p]))
}

fn blocks_of_period(s: &[char], n: usize) -> Vec<Block> {
    let mut out: Vec<Block> = Vec::new();
    let mut i = 0;
    while i + n < s.len() {
        if s[i] != s[i + n] {
            i += 1;
            continue;
        }
        let a = i;
        while i + n < s.len() && s[i] == s[i + n] {
            i += 1;
        }
        let len = i - a + n;
        if len < 2 * n {
            continue;
        }
        let start = a + len % n;
        let g = s[start..start + n].to_vec();
        if !is_primitive(&g) {
            continue;
        }
        let count = len / n;
        match out.iter_mut().find(|b| b.g == g) {
            Some(b) if b.count < count => *b = Block { g, start, count },
            Some(_) => {}
            None => out.push(Block { g, start, count }),
        }
    }
    out.sort_by_key(|b| b.start);
    out
}

/// Largest `k` such that `g` repeated `k` times occurs contiguously in `s`.
pub fn max_consecutive(s: &[char], g: &[char]) -> usize {
    let n = g.len();
    if n == 0 || s.len() < n {
        return 0;
    }
    let mut best = 0;
    for i in 0..=s.len() - n {
        let mut k = 0;
        while i + (k + 1) * n <= s.len() && &s[i + k * n..i + (k + 1) * n] == g {
            k += 1;
        }
        best = best.max(k);
    }
    best
}

/// Repetition spans of `hyp` that are errors with respect to `reference`.
///
/// `alignment` must come from aligning the same `hyp` and `reference`.
pub fn detect_repetitions(hyp: &str, reference: &str, alignment: &Alignment) -> Vec<RepeatRecord> {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    let op_at = alignment.hyp_op_index();
    let mut counted: Vec<(usize, usize)> = Vec::new();
    let mut records = Vec::new();
    for n in NGRAM_SIZES {
        for b in blocks_of_period(&h, n) {
            let (s, e) = (b.start, b.end());
            if counted.iter().any(|&(cs, ce)| cs <= s && e <= ce) {
                continue;
            }
            counted.push((s, e));
            let ref_count = max_consecutive(&r, &b.g);
            if ref_count >= b.count {
                continue;
            }
            let kind = if ref_count > 0 {
                RepeatKind::ValidRepeat
            } else if op_at[s..e].iter().any(|&k| alignment.ops[k] == EditOp::Substitute) {
                RepeatKind::SubstituteRepeat
            } else {
                RepeatKind::InsertRepeat
            };
            records.push(RepeatRecord {
                span: b.g.iter().collect(),
                n,
                kind,
                start: s,
                hyp_count: b.count,
                ref_count,
            });
        }
    }
    records.sort_by_key(|r| (r.start, std::cmp::Reverse(r.n)));
    records
}

#[cfg(test)]
mod tests {
    use super::super::align::levenshtein_align;
    use super::*;

    fn detect(h: &str, r: &str) -> Vec<RepeatRecord> {
        detect_repetitions(h, r, &levenshtein_align(h, r))
    }

    #[test]
    fn primitive_periods() {
        assert!(is_primitive(&['b', 'a']));
        assert!(!is_primitive(&['b', 'a', 'b', 'a']));
        assert!(!is_primitive(&['a', 'a']));
        assert!(is_primitive(&['a', 'a', 'b']));
    }

    #[test]
    fn consecutive_counts() {
        let s: Vec<char> = "xababab".chars().collect();
        assert_eq!(max_consecutive(&s, &['a', 'b']), 3);
        assert_eq!(max_consecutive(&s, &['b', 'a']), 2);
        assert_eq!(max_consecutive(&s, &['z', 'z']), 0);
    }

    #[test]
    fn over_repeated_reference_span_is_valid_repeat() {
        let recs = detect("dasakarere", "dasakare");
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].span, "re");
        assert_eq!(recs[0].n, 2);
        assert_eq!(recs[0].kind, RepeatKind::ValidRepeat);
    }

    #[test]
    fn repeat_matching_reference_is_not_an_error() {
        assert!(detect("abab", "abab").is_empty());
        assert!(detect("abab", "ababab").is_empty());
    }

    #[test]
    fn no_adjacent_repeat_no_records() {
        assert!(detect("transliterate", "transliteration").is_empty());
    }

    #[test]
    fn absent_span_without_substitution_is_insert_repeat() {
        let recs = detect("kaxyxy", "ka");
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].span, "xy");
        assert_eq!(recs[0].kind, RepeatKind::InsertRepeat);
    }

    #[test]
    fn bigram_run_is_not_also_a_fourgram() {
        let recs = detect("sambabababadhadhata", "samvardhita");
        let spans: Vec<(&str, usize)> = recs.iter().map(|r| (r.span.as_str(), r.n)).collect();
        assert!(spans.contains(&("ba", 2)));
        assert!(spans.contains(&("dha", 3)));
        assert!(!spans.iter().any(|&(s, _)| s == "baba" || s == "ab" || s == "adh"));
    }
}
