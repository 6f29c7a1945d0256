//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nadir::bench::{monotonicity, run_bench, to_csv};
use nadir::inference::{Decoder, Prediction, Transliterator};
use nadir::io::{read_to_string, write_atomic};
use nadir::metrics::{aggregate_report, render_table, EvalReport, REPORT_SCHEMA_VERSION};
use nadir::model::Checkpoint;
use nadir::synthdata::{apply_rules, gen_corpus, gen_ruleset, load_tsv, split_by_hash, write_tsv, RuleSet};
use nadir::training::Trainer;
use nadir::{Error, Result};
use serde::Serialize;

use crate::config::{Resolved, RunConfig, RUN_CONFIG_SCHEMA_VERSION};
use crate::{AnalyzeArgs, BenchArgs, EvalArgs, InferArgs, SynthArgs, TrainArgs};

/// Worker threads: available cores, capped by `NADIR_THREADS` when set.
pub fn worker_threads() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("NADIR_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(cores)),
            _ => Err(Error::Config(format!("NADIR_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cores),
    }
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Data(format!("missing {flag}")))
}

/// Lines with any trailing carriage return removed.
fn lines(text: &str) -> Vec<&str> {
    text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        run.preset = p;
    }
    let t = &mut run.train;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(v) = a.variant {
        t.variant = v;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
    let model = run.model_config()?;
    run.train.validate()?;
    let data = require(a.data, "--data")?;
    let train_pairs = load_tsv(&data)?;
    let valid_pairs = match &a.valid {
        Some(p) => load_tsv(p)?,
        None => Vec::new(),
    };

    let mut trainer = Trainer::new(&model, run.train.clone(), &train_pairs, &valid_pairs)?;
    let resolved = Resolved {
        schema_version: RUN_CONFIG_SCHEMA_VERSION,
        model: &trainer.params.config,
        train: &trainer.config,
    };
    log::info!("resolved config: {}", serde_json::to_string(&resolved)?);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_json(&a.out.join("config.json"), &resolved)?;
    log::info!(
        "{} training pairs ({} skipped), {} validation pairs, {} parameters",
        trainer.train_pairs().len(),
        trainer.skipped,
        valid_pairs.len(),
        trainer.params.count()
    );

    let mut log_text = String::new();
    for _ in 0..trainer.config.epochs {
        let m = trainer.run_epoch()?;
        log_text.push_str(&m.to_json_line()?);
        log_text.push('\n');
        write_atomic(&a.out.join("metrics.jsonl"), log_text.as_bytes())?;
        if trainer.best_epoch() == Some(trainer.epoch) {
            trainer.best_checkpoint()?.save(&a.out.join("model.nadr"))?;
        }
    }
    trainer.checkpoint()?.save(&a.out.join("last.nadr"))?;
    log::info!(
        "best epoch {} written to {}",
        trainer.best_epoch().unwrap_or(trainer.epoch),
        a.out.join("model.nadr").display()
    );
    Ok(())
}

fn transliterator<'a>(ck: &'a Checkpoint, decoder: Option<Decoder>, batch_size: usize) -> Result<Transliterator<'a, f32>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut t = Transliterator::new(&ck.params, &ck.src_vocab, &ck.tgt_vocab);
    t.decoder = decoder.unwrap_or(if ck.config().ar_decoder { Decoder::ArCached } else { Decoder::Nar });
    t.batch_size = batch_size;
    t.threads = worker_threads()?;
    Ok(t)
}

/// One output line: the hypothesis, plus a tab and a flag when it did not
/// end in a predicted end symbol or the input was too long.
pub fn format_prediction(p: &Prediction) -> String {
    match p {
        Prediction::Output { text, terminated: true } => text.clone(),
        Prediction::Output { text, terminated: false } => format!("{text}\tunterminated"),
        Prediction::TooLong => "\ttoo_long".into(),
    }
}

pub fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let t = transliterator(&ck, a.decoder, a.batch_size)?;
    let text = read_to_string(&a.input)?;
    let words = lines(&text);
    let preds = t.run(&words)?;
    let mut out = String::new();
    for p in &preds {
        out.push_str(&format_prediction(p));
        out.push('\n');
    }
    write_atomic(&a.output, out.as_bytes())?;
    let flagged = preds.iter().filter(|p| !p.terminated()).count();
    log::info!("{} words transliterated, {flagged} flagged", preds.len());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let t = transliterator(&ck, a.decoder, a.batch_size)?;
    let pairs = load_tsv(&require(a.data, "--data")?)?;
    let start = Instant::now();
    let (mut rep, _) = t.evaluate(&pairs)?;
    rep.inference_sec = Some(start.elapsed().as_secs_f64());
    write_json(&a.report, &rep)?;
    println!(
        "pairs {}  CER {:.2}  WAcc {:.2}  InfT {:.3} s",
        rep.pairs,
        rep.cer,
        rep.wacc,
        rep.inference_sec.unwrap_or(0.0)
    );
    Ok(())
}

/// Hypothesis text and whether it terminated, from one `infer` output line.
fn parse_hyp_line(line: &str) -> (&str, bool) {
    match line.split_once('\t') {
        Some((h, _flag)) => (h, false),
        None => (line, true),
    }
}

fn file_label(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
pub struct NamedReport {
    pub name: String,
    pub report: EvalReport,
}

#[derive(Serialize)]
pub struct AnalyzeReport {
    pub schema_version: u32,
    /// Compared files first, `--hyp` last.
    pub reports: Vec<NamedReport>,
    pub table: String,
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ref_text = read_to_string(&a.reference)?;
    let refs: Vec<&str> = lines(&ref_text)
        .into_iter()
        .map(|l| l.rsplit('\t').next().unwrap_or(l))
        .collect();
    let mut reports = Vec::new();
    for path in a.compare.iter().chain(std::iter::once(&a.hyp)) {
        let text = read_to_string(path)?;
        let (hyps, term): (Vec<&str>, Vec<bool>) = lines(&text).into_iter().map(parse_hyp_line).unzip();
        if hyps.len() != refs.len() {
            return Err(Error::Data(format!(
                "{} has {} lines but {} has {}",
                path.display(),
                hyps.len(),
                a.reference.display(),
                refs.len()
            )));
        }
        reports.push(NamedReport {
            name: file_label(path),
            report: aggregate_report(&hyps, &refs, Some(&term))?,
        });
    }
    let rows: Vec<(&str, &EvalReport)> = reports.iter().map(|r| (r.name.as_str(), &r.report)).collect();
    let table = render_table(&rows);
    print!("{table}");
    write_json(
        &a.report,
        &AnalyzeReport {
            schema_version: REPORT_SCHEMA_VERSION,
            reports,
            table,
        },
    )
}

pub fn bench(a: BenchArgs) -> Result<()> {
    if a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let text = read_to_string(&require(a.data, "--data")?)?;
    let words: Vec<&str> = lines(&text)
        .into_iter()
        .map(|l| l.split('\t').next().unwrap_or(l))
        .collect();
    let mut decoders = vec![(Decoder::Nar, "nar")];
    if ck.config().ar_decoder {
        decoders.push((Decoder::Ar, "ar"));
        decoders.push((Decoder::ArCached, "ar_cached"));
    }
    for (decoder, name) in decoders {
        let t = transliterator(&ck, Some(decoder), 1)?;
        let rows = run_bench(&t, &words, &a.batch_sizes, a.repeats)?;
        let csv = to_csv(&rows);
        match &a.out_prefix {
            Some(prefix) => {
                write_atomic(Path::new(&format!("{prefix}{name}.csv")), csv.as_bytes())?;
                if decoder == Decoder::Nar {
                    write_json(Path::new(&format!("{prefix}monotonicity.json")), &monotonicity(&rows))?;
                }
            }
            None => print!("# {name}\n{csv}"),
        }
        if decoder == Decoder::Nar {
            let m = monotonicity(&rows);
            log::info!(
                "throughput gain from batch 1 to 64: {:?}, rising at every step: {} ({:?})",
                m.overall_gain,
                m.increasing,
                m.points
            );
        }
    }
    Ok(())
}

fn parse_gen_rules(s: &str) -> Result<(u64, f64)> {
    let bad = || Error::Config(format!("--gen-rules expects seed,ambiguity, got {s:?}"));
    let (seed, amb) = s.split_once(',').ok_or_else(bad)?;
    Ok((seed.trim().parse().map_err(|_| bad())?, amb.trim().parse().map_err(|_| bad())?))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let rules = match (&a.rules, &a.gen_rules) {
        (Some(p), None) => RuleSet::from_json(&read_to_string(p)?)?,
        (None, Some(spec)) => {
            let (seed, ambiguity) = parse_gen_rules(spec)?;
            gen_ruleset(seed, a.alphabet_size, ambiguity)?
        }
        _ => return Err(Error::Config("exactly one of --rules or --gen-rules is required".into())),
    };
    if a.min_len == 0 || a.min_len > a.max_len {
        return Err(Error::Config(format!("bad length range {}..={}", a.min_len, a.max_len)));
    }
    let n_valid = a.n_valid.unwrap_or(a.n / 10);
    let n_test = a.n_test.unwrap_or(a.n / 10);
    let pairs = gen_corpus(&rules, a.n, (a.min_len, a.max_len), a.seed)?;
    debug_assert!(pairs.iter().all(|(s, t)| apply_rules(s, &rules).ok().as_deref() == Some(t.as_str())));
    let splits = split_by_hash(pairs, n_valid, n_test)?;
    let p = &a.out_prefix;
    write_tsv(Path::new(&format!("{p}train.tsv")), &splits.train)?;
    write_tsv(Path::new(&format!("{p}valid.tsv")), &splits.valid)?;
    write_tsv(Path::new(&format!("{p}test.tsv")), &splits.test)?;
    let mut json = rules.to_json()?;
    json.push('\n');
    write_atomic(Path::new(&format!("{p}rules.json")), json.as_bytes())?;
    log::info!(
        "wrote {} train, {} valid, {} test pairs with prefix {p}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );
    Ok(())
}
