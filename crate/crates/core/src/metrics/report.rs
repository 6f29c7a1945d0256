//! Corpus-level CER, word accuracy and error breakdowns.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::align::levenshtein_align;
use super::repetition::{detect_repetitions, RepeatKind, RepeatRecord};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionCounts {
    pub insert_repeat: usize,
    pub substitute_repeat: usize,
    pub valid_repeat: usize,
}

impl RepetitionCounts {
    pub fn total(&self) -> usize {
        self.insert_repeat + self.substitute_repeat + self.valid_repeat
    }

    fn record(&mut self, kind: RepeatKind) {
        match kind {
            RepeatKind::InsertRepeat => self.insert_repeat += 1,
            RepeatKind::SubstituteRepeat => self.substitute_repeat += 1,
            RepeatKind::ValidRepeat => self.valid_repeat += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRepeat {
    pub pair: usize,
    #[serde(flatten)]
    pub record: RepeatRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub insertions: usize,
    pub substitutions: usize,
    pub omissions: usize,
    pub repetitions: RepetitionCounts,
    pub details: Vec<PairRepeat>,
}

impl ErrorBreakdown {
    /// Breakdown of one pair; detail records carry `pair` as their index.
    pub fn of_pair(hyp: &str, reference: &str, pair: usize) -> Self {
        let alignment = levenshtein_align(hyp, reference);
        let (insertions, substitutions, omissions) = alignment.counts();
        let mut out = ErrorBreakdown {
            insertions,
            substitutions,
            omissions,
            ..Default::default()
        };
        for record in detect_repetitions(hyp, reference, &alignment) {
            out.repetitions.record(record.kind);
            out.details.push(PairRepeat { pair, record });
        }
        out
    }

    pub fn edits(&self) -> usize {
        self.insertions + self.substitutions + self.omissions
    }
}

impl AddAssign<&ErrorBreakdown> for ErrorBreakdown {
    fn add_assign(&mut self, o: &ErrorBreakdown) {
        self.insertions += o.insertions;
        self.substitutions += o.substitutions;
        self.omissions += o.omissions;
        self.repetitions.insert_repeat += o.repetitions.insert_repeat;
        self.repetitions.substitute_repeat += o.repetitions.substitute_repeat;
        self.repetitions.valid_repeat += o.repetitions.valid_repeat;
        self.details.extend(o.details.iter().cloned());
    }
}

/// Per-pair CER in percent.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::Data("CER is undefined for an empty reference".into()));
    }
    Ok(levenshtein_align(hyp, reference).distance as f64 / n as f64 * 100.0)
}

/// Percentage of pairs whose strings are identical; 0 for no pairs.
pub fn word_accuracy<S: AsRef<str>>(pairs: &[(S, S)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let exact = pairs.iter().filter(|(h, r)| h.as_ref() == r.as_ref()).count();
    exact as f64 / pairs.len() as f64 * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pairs: usize,
    pub exact_matches: usize,
    pub total_distance: usize,
    pub total_ref_chars: usize,
    /// Pairs left out of the CER sums because their reference is empty.
    pub empty_refs: usize,
    pub unterminated: usize,
    pub cer: f64,
    pub wacc: f64,
    pub breakdown: ErrorBreakdown,
    /// Wall-clock seconds spent producing the hypotheses, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_sec: Option<f64>,
}

impl Default for EvalReport {
    fn default() -> Self {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            pairs: 0,
            exact_matches: 0,
            total_distance: 0,
            total_ref_chars: 0,
            empty_refs: 0,
            unterminated: 0,
            cer: 0.0,
            wacc: 0.0,
            breakdown: ErrorBreakdown::default(),
            inference_sec: None,
        }
    }
}

impl EvalReport {
    fn refresh(&mut self) {
        self.cer = if self.total_ref_chars == 0 {
            0.0
        } else {
            self.total_distance as f64 / self.total_ref_chars as f64 * 100.0
        };
        self.wacc = if self.pairs == 0 {
            0.0
        } else {
            self.exact_matches as f64 / self.pairs as f64 * 100.0
        };
    }

    /// Elementwise sum, as if both reports came from one concatenated corpus.
    pub fn merge(&self, other: &EvalReport) -> EvalReport {
        let mut out = self.clone();
        out.pairs += other.pairs;
        out.exact_matches += other.exact_matches;
        out.total_distance += other.total_distance;
        out.total_ref_chars += other.total_ref_chars;
        out.empty_refs += other.empty_refs;
        out.unterminated += other.unterminated;
        let mut b = other.breakdown.clone();
        for d in &mut b.details {
            d.pair += self.pairs;
        }
        out.breakdown += &b;
        out.inference_sec = match (self.inference_sec, other.inference_sec) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
        out.refresh();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        let r: EvalReport = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "report schema_version {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Evaluates hypotheses against references pair by pair.
///
/// `terminated` flags, when given, feed the unterminated count.
pub fn aggregate_report<S: AsRef<str>>(hyps: &[S], refs: &[S], terminated: Option<&[bool]>) -> Result<EvalReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if let Some(t) = terminated {
        if t.len() != hyps.len() {
            return Err(Error::Data(format!("{} termination flags for {} pairs", t.len(), hyps.len())));
        }
    }
    let mut rep = EvalReport::default();
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        let (h, r) = (h.as_ref(), r.as_ref());
        let b = ErrorBreakdown::of_pair(h, r, i);
        let ref_len = r.chars().count();
        if ref_len == 0 {
            log::warn!("pair {i}: empty reference left out of CER");
            rep.empty_refs += 1;
        } else {
            rep.total_distance += b.edits();
            rep.total_ref_chars += ref_len;
        }
        rep.exact_matches += usize::from(h == r);
        rep.breakdown += &b;
        rep.pairs += 1;
    }
    rep.unterminated = terminated.map_or(0, |t| t.iter().filter(|&&x| !x).count());
    rep.refresh();
    Ok(rep)
}

/// Relative reduction from `old` to `new` in percent; `None` when `old` is 0.
pub fn gain(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| (old - new) / old * 100.0)
}

const COLUMNS: [&str; 4] = ["Insertion", "Substitution", "Omissions", "Repetition"];

fn columns(b: &ErrorBreakdown) -> [usize; 4] {
    [b.insertions, b.substitutions, b.omissions, b.repetitions.total()]
}

/// Aligned text table with one row per named report, then one
/// "Gain over" row for every earlier report relative to the last one.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let label_w = rows
        .iter()
        .map(|(n, _)| n.chars().count() + "Gain over ".len())
        .chain([7])
        .max()
        .unwrap();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "Variant");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>12}");
    }
    let _ = writeln!(out, "  {:>8}  {:>8}", "CER", "WAcc");
    for (name, r) in rows {
        let _ = write!(out, "{name:<label_w$}");
        for v in columns(&r.breakdown) {
            let _ = write!(out, "  {v:>12}");
        }
        let _ = writeln!(out, "  {:>8.2}  {:>8.2}", r.cer, r.wacc);
    }
    if let Some((_, last)) = rows.last() {
        for (name, r) in &rows[..rows.len() - 1] {
            let _ = write!(out, "{:<label_w$}", format!("Gain over {name}"));
            for (o, n) in columns(&r.breakdown).into_iter().zip(columns(&last.breakdown)) {
                match gain(o as f64, n as f64) {
                    Some(g) => {
                        let _ = write!(out, "  {:>11.2}%", g);
                    }
                    None => {
                        let _ = write!(out, "  {:>12}", "n/a");
                    }
                }
            }
            let _ = writeln!(out);
        }
    }
    out
}
