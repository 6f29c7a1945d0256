//! Throughput measurement over batch sizes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Transliterator;
use crate::numcore::Scalar;

pub const BENCH_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub words: usize,
    /// Median wall-clock seconds to transliterate all words.
    pub total_sec: f64,
    pub words_per_sec: f64,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times `trans` over `words` at every batch size: one untimed warm-up
/// run, then the median of `repeats` timed runs.
pub fn run_bench<T: Scalar, S: AsRef<str>>(
    trans: &Transliterator<'_, T>,
    words: &[S],
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if let Some(b) = batch_sizes.iter().find(|&&b| b == 0) {
        return Err(Error::Config(format!("batch size {b} is not allowed")));
    }
    if words.is_empty() {
        return Err(Error::Data("no words to benchmark".into()));
    }
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        let t = Transliterator {
            batch_size: bs,
            ..*trans
        };
        t.run(words)?;
        let mut times: Vec<f64> = (0..repeats)
            .map(|_| {
                let start = Instant::now();
                t.run(words).map(|_| start.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        let total_sec = median(&mut times).max(f64::MIN_POSITIVE);
        rows.push(BenchRow {
            batch_size: bs,
            words: words.len(),
            total_sec,
            words_per_sec: words.len() as f64 / total_sec,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("batch_size,total_sec,words_per_sec\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.batch_size, r.total_sec, r.words_per_sec));
    }
    s
}

/// Whether throughput grows with batch size over `1..=64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub schema_version: u32,
    /// `(batch_size, words_per_sec)` for the batch sizes in range, ascending.
    pub points: Vec<(usize, f64)>,
    /// Consecutive batch-size pairs whose throughput did not increase.
    pub violations: Vec<(usize, usize)>,
    /// No violations.
    pub increasing: bool,
    /// Throughput at the largest batch size in range over that at the
    /// smallest.
    pub overall_gain: Option<f64>,
}

pub fn monotonicity(rows: &[BenchRow]) -> MonotonicityReport {
    let mut points: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| (1..=64).contains(&r.batch_size))
        .map(|r| (r.batch_size, r.words_per_sec))
        .collect();
    points.sort_by_key(|p| p.0);
    points.dedup_by_key(|p| p.0);
    let violations: Vec<(usize, usize)> = points
        .windows(2)
        .filter(|w| w[1].1 <= w[0].1)
        .map(|w| (w[0].0, w[1].0))
        .collect();
    let overall_gain = match (points.first(), points.last()) {
        (Some(a), Some(b)) if points.len() >= 2 => Some(b.1 / a.1),
        _ => None,
    };
    MonotonicityReport {
        schema_version: BENCH_SCHEMA_VERSION,
        increasing: points.len() >= 2 && violations.is_empty(),
        overall_gain,
        points,
        violations,
    }
}
