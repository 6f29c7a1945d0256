//! Unit-cost edit distance over Unicode scalars with a deterministic backtrace.

use serde::{Deserialize, Serialize};

/// One step of an alignment, read left to right.
///
/// `Omit` consumes a reference character only; `Insert` consumes a
/// hypothesis character only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Substitute,
    Omit,
    Insert,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub distance: usize,
    pub ops: Vec<EditOp>,
}

impl Alignment {
    /// `(insertions, substitutions, omissions)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for op in &self.ops {
            match op {
                EditOp::Insert => c.0 += 1,
                EditOp::Substitute => c.1 += 1,
                EditOp::Omit => c.2 += 1,
                EditOp::Match => {}
            }
        }
        c
    }

    /// For each hypothesis position, the index of the op that consumed it.
    pub fn hyp_op_index(&self) -> Vec<usize> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| !matches!(op, EditOp::Omit))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Aligns `hyp` against `reference`.
///
/// The backtrace starts at the bottom-right cell and at every cell takes the
/// first admissible move among match, substitution, omission, insertion.
pub fn levenshtein_align(hyp: &str, reference: &str) -> Alignment {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    align_chars(&h, &r)
}

pub fn align_chars(h: &[char], r: &[char]) -> Alignment {
    let w = r.len() + 1;
    let mut d = vec![0u32; (h.len() + 1) * w];
    for j in 0..w {
        d[j] = j as u32;
    }
    for i in 1..=h.len() {
        d[i * w] = i as u32;
        for j in 1..w {
            let diag = d[(i - 1) * w + j - 1] + u32::from(h[i - 1] != r[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }

    let (mut i, mut j) = (h.len(), r.len());
    let mut ops = Vec::with_capacity(h.len().max(r.len()));
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        let op = if i > 0 && j > 0 && h[i - 1] == r[j - 1] && d[(i - 1) * w + j - 1] == cur {
            EditOp::Match
        } else if i > 0 && j > 0 && d[(i - 1) * w + j - 1] + 1 == cur {
            EditOp::Substitute
        } else if j > 0 && d[i * w + j - 1] + 1 == cur {
            EditOp::Omit
        } else {
            EditOp::Insert
        };
        match op {
            EditOp::Match | EditOp::Substitute => {
                i -= 1;
                j -= 1;
            }
            EditOp::Omit => j -= 1,
            EditOp::Insert => i -= 1,
        }
        ops.push(op);
    }
    ops.reverse();
    Alignment {
        distance: d[h.len() * w + r.len()] as usize,
        ops,
    }
}
