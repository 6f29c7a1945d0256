use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nadir::synthdata::{apply_rules, gen_corpus, gen_ruleset, load_tsv, write_tsv, RuleSet};
use tempfile::TempDir;

fn nadir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nadir"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn nadir")
}

fn ok(args: &[&str]) -> Output {
    let out = nadir(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn toy_corpus(dir: &Path) -> PathBuf {
    let rules = gen_ruleset(3, 8, 0.0).unwrap();
    let pairs = gen_corpus(&rules, 50, (3, 6), 1).unwrap();
    let p = dir.join("toy.tsv");
    write_tsv(&p, &pairs).unwrap();
    p
}

/// Trains a tiny model to convergence on the toy corpus; returns the output
/// directory.
fn train_toy(dir: &Path, data: &Path) -> PathBuf {
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"preset": "tiny", "train": {"lr": 0.001, "batch_size": 10, "epochs": 150, "warmup_fraction": 0.05}}"#,
    )
    .unwrap();
    let out = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(data), "--valid", s(data), "--out", s(&out)]);
    out
}

fn sources(dir: &Path, data: &Path) -> PathBuf {
    let words: String = load_tsv(data).unwrap().iter().map(|(w, _)| format!("{w}\n")).collect();
    let p = dir.join("words.txt");
    std::fs::write(&p, words).unwrap();
    p
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    assert_eq!(nadir(&["train", "--out", s(&out)]).status.code(), Some(3));
    assert_eq!(
        nadir(&["train", "--variant", "transformer", "--data", "x", "--out", s(&out)]).status.code(),
        Some(2)
    );
    let bad = dir.path().join("bad.nadr");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let words = dir.path().join("w.txt");
    std::fs::write(&words, "abc\n").unwrap();
    let o = dir.path().join("hyp.txt");
    assert_eq!(
        nadir(&["infer", "--ckpt", s(&bad), "--input", s(&words), "--output", s(&o)]).status.code(),
        Some(4)
    );
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    assert_eq!(
        nadir(&["train", "--config", s(&cfg), "--data", s(&words), "--out", s(&out)]).status.code(),
        Some(2)
    );
    let missing = dir.path().join("missing.tsv");
    assert_eq!(nadir(&["train", "--data", s(&missing), "--out", s(&out)]).status.code(), Some(3));
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = toy_corpus(dir.path());
    let run = train_toy(dir.path(), &data);
    for f in ["config.json", "metrics.jsonl", "model.nadr", "last.nadr"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let resolved: serde_json::Value = serde_json::from_str(&read(&run.join("config.json"))).unwrap();
    assert_eq!(resolved["schema_version"], 1);
    let metrics = read(&run.join("metrics.jsonl"));
    assert_eq!(metrics.lines().count(), 150);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert!(v["val_cer"].is_number());
    }

    let ckpt = run.join("model.nadr");
    let words = sources(dir.path(), &data);
    let hyp = dir.path().join("hyp.txt");
    ok(&["infer", "--ckpt", s(&ckpt), "--input", s(&words), "--output", s(&hyp)]);
    let targets: Vec<String> = load_tsv(&data).unwrap().into_iter().map(|(_, t)| t).collect();
    let got: Vec<String> = read(&hyp).lines().map(str::to_owned).collect();
    assert_eq!(got, targets);

    let one = dir.path().join("hyp1.txt");
    ok(&["infer", "--ckpt", s(&ckpt), "--input", s(&words), "--output", s(&one), "--batch-size", "1"]);
    assert_eq!(read(&one), read(&hyp));

    let report = dir.path().join("eval.json");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("CER 0.00"));
    let r: serde_json::Value = serde_json::from_str(&read(&report)).unwrap();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["cer"], 0.0);
    assert_eq!(r["wacc"], 100.0);
    assert!(r["inference_sec"].as_f64().unwrap() >= 0.0);

    let analysis = dir.path().join("analysis.json");
    ok(&["analyze", "--ref", s(&data), "--hyp", s(&hyp), "--report", s(&analysis)]);
    let a: serde_json::Value = serde_json::from_str(&read(&analysis)).unwrap();
    assert_eq!(a["reports"][0]["report"]["cer"], 0.0);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let empty_out = dir.path().join("empty_out.txt");
    ok(&["infer", "--ckpt", s(&ckpt), "--input", s(&empty), "--output", s(&empty_out)]);
    assert_eq!(read(&empty_out), "");

    assert_eq!(
        nadir(&["infer", "--ckpt", s(&ckpt), "--input", s(&words), "--output", s(&one), "--batch-size", "0"])
            .status
            .code(),
        Some(2)
    );

    let long = dir.path().join("long.txt");
    std::fs::write(&long, format!("{}\n", "a".repeat(40))).unwrap();
    ok(&["infer", "--ckpt", s(&ckpt), "--input", s(&long), "--output", s(&one)]);
    assert_eq!(read(&one), "\ttoo_long\n");

    let prefix = format!("{}/bench_", dir.path().display());
    ok(&[
        "bench", "--ckpt", s(&ckpt), "--data", s(&data), "--batch-sizes", "4", "--repeats", "1", "--out-prefix", &prefix,
    ]);
    let csv = read(Path::new(&format!("{prefix}nar.csv")));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "batch_size,total_sec,words_per_sec");
    assert_eq!(rows.len(), 2);
    let f: Vec<f64> = rows[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(f[0], 4.0);
    assert!((f[2] - 50.0 / f[1]).abs() <= 1e-6 * f[2]);
}

#[test]
fn synth_is_deterministic_with_disjoint_splits() {
    let dir = TempDir::new().unwrap();
    let run = |tag: &str| -> String {
        let prefix = format!("{}/{tag}_", dir.path().display());
        ok(&["synth", "--gen-rules", "7,0.3", "--n", "300", "--seed", "5", "--out-prefix", &prefix]);
        prefix
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["train.tsv", "valid.tsv", "test.tsv", "rules.json"] {
        assert_eq!(read(Path::new(&format!("{a}{f}"))), read(Path::new(&format!("{b}{f}"))), "{f}");
    }
    let rules = RuleSet::from_json(&read(Path::new(&format!("{a}rules.json")))).unwrap();
    let split = |f: &str| load_tsv(Path::new(&format!("{a}{f}.tsv"))).unwrap();
    let (train, valid, test) = (split("train"), split("valid"), split("test"));
    assert_eq!((valid.len(), test.len()), (30, 30));
    assert_eq!(train.len() + valid.len() + test.len(), 300);
    let mut all = std::collections::HashSet::new();
    for (src, tgt) in train.iter().chain(&valid).chain(&test) {
        assert!(all.insert(src.clone()), "{src} appears twice");
        assert_eq!(&apply_rules(src, &rules).unwrap(), tgt);
        assert!((4..=10).contains(&src.chars().count()));
    }
}
