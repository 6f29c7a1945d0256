//! Transliteration quality metrics: CER, word accuracy and a breakdown of
//! insertion, substitution, omission and repetition errors.

mod align;
mod repetition;
mod report;

pub use align::{align_chars, levenshtein_align, Alignment, EditOp};
pub use repetition::{detect_repetitions, max_consecutive, RepeatKind, RepeatRecord, NGRAM_SIZES};
pub use report::{
    aggregate_report, cer, gain, render_table, word_accuracy, ErrorBreakdown, EvalReport, PairRepeat,
    RepetitionCounts, REPORT_SCHEMA_VERSION,
};
