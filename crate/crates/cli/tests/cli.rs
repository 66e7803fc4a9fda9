//! Drives the `tokenseg` binary end to end on tiny phantoms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tokenseg");

/// Three-level network sized for 8³ phantoms.
const TINY: &str = "\
channels = 2,3,4
layout = 12,2,1
token_dim = 4
k = 6
codebook_size = 8
max_epochs = 3
patience = 3
base_lr = 0.01
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, count: usize, seed: u64) {
    ok(&[
        "phantom", "--out", s(dir), "--count", &count.to_string(), "--seed", &seed.to_string(),
        "--dims", "8x8x8", "--min-radius", "1.5", "--max-radius", "3",
    ]);
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

fn kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn digests(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn phantom_writes_pairs_and_index_deterministically() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    phantoms(&a, 4, 7);
    phantoms(&b, 4, 7);
    let files = digests(&a);
    assert_eq!(files.keys().filter(|n| n.ends_with(".tsv3")).count(), 8);
    assert!(files.contains_key("index.csv"));
    assert!(files.contains_key("manifest.txt"));
    // the manifest names its own output paths, which differ
    let other = digests(&b);
    for (name, bytes) in &files {
        if name != "manifest.txt" {
            assert!(other.get(name) == Some(bytes), "{name} differs between identical runs");
        }
    }
    let index = fs::read_to_string(a.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 5);

    let c = t.path().join("c");
    phantoms(&c, 4, 8);
    assert_ne!(fs::read(a.join("case_000.vol.tsv3")).unwrap(), fs::read(c.join("case_000.vol.tsv3")).unwrap());
}

#[test]
fn phantom_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x");
    assert_eq!(code(&run(&["phantom", "--out", s(&out), "--count", "0"])), 2);
    assert_eq!(code(&run(&["phantom", "--out", s(&out), "--count", "2", "--dims", "8x8"])), 2);
    assert_eq!(code(&run(&["phantom", "--out", s(&out), "--count", "2", "--min-radius", "5", "--max-radius", "1"])), 2);
}

#[test]
fn train_infer_eval_round() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, 2, 3);
    let cfg = tiny_config(t.path());
    let run_dir = t.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir), "--seed", "5"]);
    for f in ["best.ckpt", "final.ckpt", "runlog.csv", "manifest.txt"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run_dir.join("runlog.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_loss,val_dice,val_iou,lr,wall_ms");
    assert_eq!(log.lines().count(), 4);
    let manifest = kv(&fs::read_to_string(run_dir.join("manifest.txt")).unwrap());
    assert_eq!(manifest["seed"], "5");
    assert_eq!(manifest["config.k"], "6");
    assert!(manifest.keys().any(|k| k.starts_with("input.") && k.ends_with("index.csv")));

    // Same seed, same bytes.
    let again = t.path().join("again");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&again), "--seed", "5"]);
    for f in ["best.ckpt", "final.ckpt", "runlog.csv"] {
        assert_eq!(fs::read(run_dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let ckpt = run_dir.join("best.ckpt");
    let mask = t.path().join("pred.mask.tsv3");
    let toks = t.path().join("tokens.csv");
    ok(&[
        "infer", "--ckpt", s(&ckpt), "--in", s(&data.join("case_000.vol.tsv3")), "--out", s(&mask),
        "--emit-tokens", s(&toks),
    ]);
    let pred = tokenseg::volume::load_mask(&mask).unwrap();
    assert_eq!(pred.dims, tokenseg::volume::Dims::cube(8));
    let rows = fs::read_to_string(&toks).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "rank,level,d,h,w,code,score");
    assert_eq!(rows.lines().count() - 1, 6);

    let strict = t.path().join("strict.mask.tsv3");
    ok(&["infer", "--ckpt", s(&ckpt), "--in", s(&data.join("case_001.vol.tsv3")), "--out", s(&strict), "--theta", "1.0"]);
    let strict = tokenseg::volume::load_mask(&strict).unwrap();
    assert!(strict.count() <= pred.count().max(1));

    let report = t.path().join("report.txt");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    let r = kv(&fs::read_to_string(&report).unwrap());
    assert_eq!(r["cases"], "2");
    for key in tokenseg::objective::METRIC_KEYS {
        assert!(r.contains_key(&format!("mean.{key}")), "mean.{key}");
        let per: Vec<f64> = ["case_000", "case_001"]
            .iter()
            .filter_map(|c| r[&format!("case.{c}.{key}")].parse().ok())
            .collect();
        if let Ok(mean) = r[&format!("mean.{key}")].parse::<f64>() {
            let want = per.iter().sum::<f64>() / per.len() as f64;
            assert!((mean - want).abs() < 1e-12, "{key}: {mean} vs {want}");
        }
    }
}

#[test]
fn train_and_eval_failures() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let missing = t.path().join("nope");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&t.path().join("r"))]);
    assert_eq!(code(&o), 2);

    let data = t.path().join("data");
    phantoms(&data, 2, 1);
    let bad = run(&["train", "--data", s(&data), "--out", s(&t.path().join("r")), "--set", "k=9999"]);
    assert_eq!(code(&bad), 2);
    let bad = run(&["train", "--data", s(&data), "--out", s(&t.path().join("r")), "--set", "nonsense=1"]);
    assert_eq!(code(&bad), 2);

    let run_dir = t.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir), "--set", "max_epochs=1", "--set", "patience=1"]);
    let ckpt = run_dir.join("final.ckpt");

    // wrong shape for the checkpoint
    let other = t.path().join("other");
    ok(&["phantom", "--out", s(&other), "--count", "1", "--dims", "8x8x10", "--min-radius", "1.5", "--max-radius", "3"]);
    let o = run(&["infer", "--ckpt", s(&ckpt), "--in", s(&other.join("case_000.vol.tsv3")), "--out", s(&t.path().join("m.tsv3"))]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("8x8x10") && err.contains("8x8x8"), "{err}");

    // an unreadable case is skipped and reported
    fs::write(data.join("case_001.mask.tsv3"), b"garbage").unwrap();
    let report = t.path().join("report.txt");
    let o = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&o), 1);
    let r = kv(&fs::read_to_string(&report).unwrap());
    assert_eq!(r["cases"], "1");
    assert!(r.contains_key("skipped.case_001"));
}

#[test]
fn ablate_rows_and_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, 2, 11);
    let cfg = tiny_config(t.path());
    let out = t.path().join("tokens.csv");
    ok(&[
        "ablate", "--config", s(&cfg), "--axis", "tokens", "--values", "3,6,9", "--data", s(&data), "--out", s(&out),
        "--set", "max_epochs=2", "--set", "patience=2",
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,dice,iou,hd95,time_ms,util,boundary_ratio");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("3,") && lines[3].starts_with("9,"));
    assert!(t.path().join("tokens.csv.manifest.txt").is_file());

    let o = run(&["ablate", "--config", s(&cfg), "--axis", "strategy", "--values", "random,best", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["ablate", "--config", s(&cfg), "--axis", "depth", "--values", "1", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["ablate", "--config", s(&cfg), "--axis", "tokens", "--values", "100", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn default_config_is_echoed_into_the_manifest() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["phantom", "--out", s(&data), "--count", "1", "--seed", "2"]);
    let run_dir = t.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run_dir), "--set", "max_epochs=1", "--set", "patience=1"]);
    let m = kv(&fs::read_to_string(run_dir.join("manifest.txt")).unwrap());
    assert_eq!(m["config.n"], "400");
    assert_eq!(m["config.k"], "100");
    assert_eq!(m["config.levels"], "4");
    assert_eq!(m["config.theta"], "0.5");
    assert_eq!(m["config.codebook_size"], "512");
}
