//! Synthetic transliteration tasks with controllable mapping ambiguity.
//!
//! Source words are over the lowercase Latin letters, targets over
//! Devanagari letters. Besides a plain bijection, a rule set can contain
//! digraphs that collapse two letters into one target symbol, context rules
//! that rewrite a letter depending on its successor, and letters that expand
//! into two or three target symbols.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const RULES_SCHEMA_VERSION: u32 = 1;

/// Devanagari independent vowels and consonants, U+0905..=U+0939.
fn target_pool() -> Vec<char> {
    (0x0905u32..=0x0939).filter_map(char::from_u32).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRule {
    pub ch: char,
    /// The rule fires when the following character is one of these.
    pub next: BTreeSet<char>,
    pub replacement: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub schema_version: u32,
    pub seed: u64,
    pub ambiguity: f64,
    pub source_alphabet: Vec<char>,
    pub target_alphabet: Vec<char>,
    pub one_to_one: BTreeMap<char, char>,
    pub one_to_many: BTreeMap<char, String>,
    pub many_to_one: BTreeMap<String, char>,
    pub context_rules: Vec<ContextRule>,
}

impl RuleSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<RuleSet> {
        let r: RuleSet = serde_json::from_str(s)?;
        if r.schema_version != RULES_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "rules schema_version {} is not supported (expected {RULES_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        for c in &r.source_alphabet {
            if !r.one_to_one.contains_key(c) && !r.one_to_many.contains_key(c) {
                return Err(Error::Config(format!("source character {c:?} has no fallback rule")));
            }
        }
        if r.many_to_one.keys().any(|k| k.chars().count() != 2) {
            return Err(Error::Config("many_to_one keys must be two characters".into()));
        }
        Ok(r)
    }

    fn context_for(&self, ch: char) -> Option<&ContextRule> {
        self.context_rules.iter().find(|r| r.ch == ch)
    }
}

/// Builds a rule set over the first `alphabet_size` lowercase letters.
///
/// `ambiguity` is the fraction of letters that take part in a context rule
/// or a digraph; any positive value yields at least one digraph, and a
/// quarter of that fraction of letters also expands into several symbols.
pub fn gen_ruleset(seed: u64, alphabet_size: usize, ambiguity: f64) -> Result<RuleSet> {
    if !(4..=26).contains(&alphabet_size) {
        return Err(Error::Config(format!("alphabet size must be in 4..=26, got {alphabet_size}")));
    }
    if !(0.0..=1.0).contains(&ambiguity) {
        return Err(Error::Config(format!("ambiguity must be in [0, 1], got {ambiguity}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source: Vec<char> = ('a'..='z').take(alphabet_size).collect();
    let mut pool = target_pool();
    pool.shuffle(&mut rng);
    let (images, spare) = pool.split_at(alphabet_size);
    let one_to_one: BTreeMap<char, char> = source.iter().copied().zip(images.iter().copied()).collect();

    let mut rules = RuleSet {
        schema_version: RULES_SCHEMA_VERSION,
        seed,
        ambiguity,
        source_alphabet: source.clone(),
        target_alphabet: Vec::new(),
        one_to_one,
        one_to_many: BTreeMap::new(),
        many_to_one: BTreeMap::new(),
        context_rules: Vec::new(),
    };
    if ambiguity > 0.0 {
        let n_ambiguous = ((ambiguity * alphabet_size as f64).round() as usize).clamp(1, alphabet_size);
        let n_expand = ((ambiguity * alphabet_size as f64 / 4.0).round() as usize).min(alphabet_size - 1);
        let mut order = source.clone();
        order.shuffle(&mut rng);
        for &c in order.iter().take(n_expand) {
            let len = rng.gen_range(2..=3);
            let s: String = (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            rules.one_to_many.insert(c, s);
        }
        let plain: Vec<char> = source.iter().copied().filter(|c| !rules.one_to_many.contains_key(c)).collect();

        let mut fresh = spare.iter().copied();
        order.shuffle(&mut rng);
        for (k, &c) in order.iter().take(n_ambiguous).enumerate() {
            if k % 2 == 0 {
                let partner = loop {
                    let p = source[rng.gen_range(0..source.len())];
                    if !rules.many_to_one.contains_key(&format!("{c}{p}")) {
                        break p;
                    }
                };
                let merged = loop {
                    let x = plain[rng.gen_range(0..plain.len())];
                    if x != c || plain.len() == 1 {
                        break x;
                    }
                };
                rules.many_to_one.insert(format!("{c}{partner}"), rules.one_to_one[&merged]);
            } else {
                let k_next = (alphabet_size / 3).max(1);
                let mut next = source.clone();
                next.shuffle(&mut rng);
                let next: BTreeSet<char> = next.into_iter().take(k_next).collect();
                let replacement = match fresh.next() {
                    Some(f) => f.to_string(),
                    None => rules.one_to_one[&plain[rng.gen_range(0..plain.len())]].to_string(),
                };
                rules.context_rules.push(ContextRule { ch: c, next, replacement });
            }
        }
    }
    let mut target: BTreeSet<char> = rules.one_to_one.values().copied().collect();
    target.extend(rules.one_to_many.values().flat_map(|s| s.chars()));
    target.extend(rules.many_to_one.values().copied());
    target.extend(rules.context_rules.iter().flat_map(|r| r.replacement.chars()));
    rules.target_alphabet = target.into_iter().collect();
    Ok(rules)
}

/// Transliterates `word` with a left-to-right scan: a matching digraph
/// first, then a context rule on the next character, then a multi-symbol
/// expansion, then the one-to-one map.
pub fn apply_rules(word: &str, rules: &RuleSet) -> Result<String> {
    let w: Vec<char> = word.chars().collect();
    let mut out = String::new();
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() {
            let pair: String = w[i..i + 2].iter().collect();
            if let Some(&t) = rules.many_to_one.get(&pair) {
                out.push(t);
                i += 2;
                continue;
            }
        }
        let c = w[i];
        if let Some(r) = rules.context_for(c).filter(|r| i + 1 < w.len() && r.next.contains(&w[i + 1])) {
            out.push_str(&r.replacement);
        } else if let Some(s) = rules.one_to_many.get(&c) {
            out.push_str(s);
        } else if let Some(&t) = rules.one_to_one.get(&c) {
            out.push(t);
        } else {
            return Err(Error::Data(format!("no rule maps character {c:?} in {word:?}")));
        }
        i += 1;
    }
    Ok(out)
}

pub type Pair = (String, String);

/// `n` distinct random words with lengths in `len_range` (inclusive) and
/// their rule images, in generation order.
pub fn gen_corpus(rules: &RuleSet, n: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<Pair>> {
    let (lo, hi) = len_range;
    if n == 0 || lo == 0 || lo > hi {
        return Err(Error::Config(format!("need n >= 1 and 1 <= min_len <= max_len, got n={n}, lengths {lo}..={hi}")));
    }
    let k = rules.source_alphabet.len() as f64;
    let possible: f64 = (lo..=hi).map(|l| k.powi(l as i32)).sum();
    if possible < n as f64 {
        return Err(Error::Config(format!(
            "alphabet of {} letters yields only {possible} words of length {lo}..={hi}, need {n}",
            rules.source_alphabet.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(lo..=hi);
        let w: String = (0..len)
            .map(|_| rules.source_alphabet[rng.gen_range(0..rules.source_alphabet.len())])
            .collect();
        if seen.insert(w.clone()) {
            let t = apply_rules(&w, rules)?;
            out.push((w, t));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

fn word_hash(w: &str) -> [u8; 32] {
    Sha256::digest(w.as_bytes()).into()
}

/// Orders pairs by the SHA-256 of their source word; the first `n_test`
/// form the test split, the next `n_valid` the validation split, and the
/// rest the training split. Each split keeps the input order.
pub fn split_by_hash(pairs: Vec<Pair>, n_valid: usize, n_test: usize) -> Result<Splits> {
    if n_valid + n_test >= pairs.len() {
        return Err(Error::Config(format!(
            "{} pairs cannot supply {n_valid} validation and {n_test} test pairs plus training data",
            pairs.len()
        )));
    }
    let mut ranked: Vec<(usize, [u8; 32])> = pairs.iter().enumerate().map(|(i, p)| (i, word_hash(&p.0))).collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1));
    let mut bucket = vec![0u8; pairs.len()];
    for (rank, (i, _)) in ranked.iter().enumerate() {
        bucket[*i] = if rank < n_test {
            2
        } else if rank < n_test + n_valid {
            1
        } else {
            0
        };
    }
    let mut s = Splits::default();
    for (p, b) in pairs.into_iter().zip(bucket) {
        match b {
            0 => s.train.push(p),
            1 => s.valid.push(p),
            _ => s.test.push(p),
        }
    }
    Ok(s)
}

/// Parses `source<TAB>target` lines. CRLF endings are accepted.
pub fn parse_tsv(text: &str) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    for (i, line) in body.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(t), None) => out.push((s.to_string(), t.to_string())),
            _ => {
                return Err(Error::Data(format!(
                    "line {}: expected exactly one tab, found {}",
                    i + 1,
                    line.matches('\t').count()
                )))
            }
        }
    }
    Ok(out)
}

pub fn load_tsv(path: &Path) -> Result<Vec<Pair>> {
    parse_tsv(&read_to_string(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn format_tsv(pairs: &[Pair]) -> Result<String> {
    let mut s = String::new();
    for (i, (a, b)) in pairs.iter().enumerate() {
        if [a, b].iter().any(|x| x.contains(['\t', '\n', '\r'])) {
            return Err(Error::Data(format!("pair {}: tab or line break inside a field", i + 1)));
        }
        s.push_str(a);
        s.push('\t');
        s.push_str(b);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_tsv(path: &Path, pairs: &[Pair]) -> Result<()> {
    write_atomic(path, format_tsv(pairs)?.as_bytes())
}
