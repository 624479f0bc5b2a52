use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn assph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_assph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = assph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--profile", "desk", "--epochs", "3", "--code-length", "16",
    "--set", "dHidden=32", "--set", "Ks=20", "--set", "Kr=5", "--set", "batchSize=16",
];

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth", "--classes", "3", "--instances", "150", "--dim-image", "24", "--dim-text", "12",
        "--noise-sigma", "0.2", "--seed", "7", "--train-size", "100", "--exclude-train-from-db",
        "--out", p(&data),
    ]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--bundle", p(data)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", p(out)]);
    ok(&args);
}

#[test]
fn synth_writes_bundle_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    for f in ["image.assf", "text.assf", "labels.csv", "bundle.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let m = read_json(data.join("manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["synthConfig"]["classes"], 3);
    let b = read_json(data.join("bundle.json"));
    assert_eq!(b["split"]["query"].as_array().unwrap().len(), 15);
    assert_eq!(b["split"]["train"].as_array().unwrap().len(), 100);
    assert_eq!(b["split"]["retrieval"].as_array().unwrap().len(), 35);
}

#[test]
fn train_is_restartable_and_eval_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let (r1, r2) = (dir.path().join("run1"), dir.path().join("run2"));
    train(&data, &r1, &[]);
    train(&data, &r2, &[]);
    for f in [
        "image.assp", "text.assp", "image_query.assb", "text_query.assb", "image_db.assb",
        "text_db.assb", "eval.json", "config.json", "correlation.csv",
    ] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(r1.join("history.jsonl")).unwrap().lines().count(), 3);

    let manifest = read_json(r1.join("manifest.json"));
    let digests = manifest["inputs"].as_object().unwrap();
    assert_eq!(digests.len(), 4);
    assert!(digests.values().all(|d| d.as_str().unwrap().len() == 64));
    assert_eq!(manifest["trainConfig"]["epochs"], 3);

    let ev = dir.path().join("ev");
    ok(&["eval", "--bundle", p(&data), "--run", p(&r1), "--out", p(&ev)]);
    let a = read_json(r1.join("eval.json"));
    let b = read_json(ev.join("eval.json"));
    for d in ["i2t", "t2i"] {
        let (x, y) = (a[d]["mapAll"].as_f64().unwrap(), b[d]["mapAll"].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-6, "{d}: {x} vs {y}");
    }

    let codes = dir.path().join("codes");
    ok(&["encode", "--bundle", p(&data), "--run", p(&r1), "--out", p(&codes)]);
    assert_eq!(
        std::fs::read(codes.join("image_query.assb")).unwrap(),
        std::fs::read(r1.join("image_query.assb")).unwrap()
    );
    let ev2 = dir.path().join("ev2");
    ok(&["eval", "--bundle", p(&data), "--codes", p(&codes), "--out", p(&ev2)]);
    assert_eq!(read_json(ev2.join("eval.json")), b);
    assert!(std::fs::read_to_string(ev2.join("i2t_pr.csv")).unwrap().starts_with("recall,precision\n"));
    assert!(std::fs::read_to_string(ev2.join("t2i_topk.csv")).unwrap().starts_with("k,precision\n"));

    let single = dir.path().join("single");
    ok(&[
        "encode", "--features", p(&data.join("text.assf")), "--checkpoint", p(&r1.join("text.assp")),
        "--out", p(&single),
    ]);
    let bytes = std::fs::read(single.join("codes.assb")).unwrap();
    assert_eq!(&bytes[..4], b"ASSB");
}

#[test]
fn build_sim_dumps_similarity_and_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("sim");
    let mut args = vec!["build-sim", "--bundle", p(&data)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", p(&out)]);
    ok(&args);
    let s = std::fs::read(out.join("similarity.assf")).unwrap();
    assert_eq!(&s[..4], b"ASSF");
    assert_eq!(s.len(), 16 + 100 * 100 * 4);
    let r = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert!(r.starts_with("i,j\n0,0\n"));
    let stats = read_json(out.join("correlation_stats.json"));
    assert_eq!(stats["count"].as_u64().unwrap() as usize, r.lines().count() - 1);
}

#[test]
fn ablate_writes_five_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--bundle", p(&data)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--variants", "noadapt,paircorr,nocorr,nobinopt", "--out", p(&out)]);
    ok(&args);
    let table = read_json(out.join("ablation.json"));
    let names: Vec<&str> = table.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["ASSPH", "ASSPH_NoAdapt", "ASSPH_PairCorr", "ASSPH_NoCorr", "ASSPH_NoBinOpt"]
    );
    for row in table.as_array().unwrap() {
        let m = row["i2tMapAll"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
    assert!(out.join("ASSPH_NoCorr").join("image.assp").exists());
    assert!(out.join("manifest.json").exists());
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn failures_exit_with_class_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");

    let r = assph(&["train", "--bundle", "/nonexistent/bundle", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_of(&r)["error"]["class"], "data");

    let r = assph(&["train", "--bogus-flag"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_of(&r)["error"]["code"], 2);

    let data = synth(dir.path());
    let r = assph(&["train", "--bundle", p(&data), "--set", "gamma=3", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists(), "config errors are reported before any output");

    let r = assph(&["train", "--bundle", p(&data), "--set", "batchSize=5000", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let mut args = vec!["train", "--bundle", p(&data)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "opt.learningRate=1e300", "--out", p(&out)]);
    let r = assph(&args);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(error_of(&r)["error"]["class"], "numeric");
}
