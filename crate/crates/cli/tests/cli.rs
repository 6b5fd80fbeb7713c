use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lrmt_core::corpus::write_lines;
use lrmt_core::synthetic::{spanish_like_sentences, Cipher};

fn lrmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrmt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lrmt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, lines: &[String]) {
    write_lines(path, lines.iter().map(String::as_str)).unwrap();
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let out = lrmt(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(lrmt(&["score", "--bogus"]).status.code(), Some(2));
    assert_eq!(lrmt(&[]).status.code(), Some(2));
    let out = lrmt(&["score", "--hyp", "/nonexistent/h", "--ref", "/nonexistent/r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(lrmt(&["--help"]).status.code(), Some(0));
}

#[test]
fn score_prints_a_stable_report_with_signature() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h.txt"), dir.path().join("r.txt"));
    write(&h, &["la casa es roja".into(), "hola".into()]);
    write(&r, &["la casa es roja".into(), "hola mundo".into()]);
    let a = ok(&["score", "--hyp", s(&h), "--ref", s(&r)]);
    let b = ok(&["score", "--hyp", s(&h), "--ref", s(&r)]);
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v["signature"]
        .as_str()
        .unwrap()
        .starts_with("nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no"));
    let score = v["score"].as_f64().unwrap();
    assert!(score > 0.0 && score < 100.0);
    assert_eq!(score, (score * 1e4).round() / 1e4);
}

#[test]
fn corpus_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("a.es"), &["Hola .".into(), "¿ Qué tal ?".into(), "Hola .".into()]);
    write(&d.join("a.gn"), &["Mba'éichapa .".into(), "Mba'éichapa ?".into(), "Mba'éichapa .".into()]);
    write(&d.join("b.es"), &["Hola .".into()]);
    write(&d.join("b.gn"), &["Mba'éichapa .".into()]);

    let out = ok(&[
        "ingest", "--src", s(&d.join("a.es")), "--tgt", s(&d.join("a.gn")), "--pair", "es-gn", "--out",
        s(&d.join("a")),
    ]);
    assert!(out.contains("\"count\": 3"));
    ok(&[
        "ingest", "--src", s(&d.join("b.es")), "--tgt", s(&d.join("b.gn")), "--pair", "es-gn", "--provenance",
        "bibles", "--out", s(&d.join("b")),
    ]);
    let (ca, cb) = (d.join("a/corpus.json"), d.join("b/corpus.json"));

    let audit: serde_json::Value =
        serde_json::from_str(&ok(&["audit", "--corpus", s(&ca), "--corpus", s(&cb)])).unwrap();
    assert_eq!(audit["duplicates"], 1);
    assert_eq!(audit["overlaps"][0]["count"], 1);

    let manifest = ok(&["merge", "--corpus", s(&ca), "--corpus", s(&cb), "--dedup", "--out", s(&d.join("m"))]);
    // the only bibles pair duplicates an earlier one
    assert!(!manifest.contains("\"bibles\""));
    let kept = ok(&["merge", "--corpus", s(&ca), "--corpus", s(&cb), "--out", s(&d.join("m2"))]);
    assert!(kept.contains("\"bibles\""));
    let merged: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("m/corpus.json")).unwrap()).unwrap();
    assert_eq!(merged["pairs"].as_array().unwrap().len(), 2);

    let before = std::fs::read(&ca).unwrap();
    ok(&["normalize", "--corpus", s(&ca), "--detokenize", "--out", s(&d.join("n"))]);
    assert_eq!(std::fs::read(&ca).unwrap(), before);
    let n = std::fs::read_to_string(d.join("n/corpus.json")).unwrap();
    assert!(n.contains("¿Qué tal?"), "{n}");

    let v = ok(&["vocab", "--corpus", s(&ca), "--tags", "quy", "--out", s(&d.join("v"))]);
    assert!(v.contains("\"quy\"") && v.contains("\"gn\""));
    assert!(d.join("v/vocab.json").exists());
}

#[test]
fn czn_normalization_touches_targets_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("x.es"), &["a¹".into()]);
    write(&d.join("x.czn"), &["ta¹ ta³".into()]);
    ok(&["ingest", "--src", s(&d.join("x.es")), "--tgt", s(&d.join("x.czn")), "--pair", "es-czn", "--out", s(d)]);
    ok(&["normalize", "--corpus", s(&d.join("corpus.json")), "--czn", "--out", s(&d.join("n"))]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("n/corpus.json")).unwrap()).unwrap();
    assert_eq!(v["pairs"][0]["target"], "ta1 ta3");
    assert_eq!(v["pairs"][0]["source"], "a¹");
}

/// Writes two cipher corpora plus dev sets as corpus JSON via `ingest`.
fn synthetic_job(d: &Path) -> PathBuf {
    let sents = spanish_like_sentences(3, 40, 1, 2);
    let mut corpora = Vec::new();
    let mut dev = Vec::new();
    for (i, code) in ["cxa", "cxb"].iter().enumerate() {
        let c = Cipher::random(code, i as u64).unwrap();
        for (name, range) in [("train", 0..30), ("dev", 30..40)] {
            let src = d.join(format!("{code}.{name}.es"));
            let tgt = d.join(format!("{code}.{name}.{code}"));
            write(&src, &sents[range.clone()]);
            write(&tgt, &sents[range].iter().map(|x| c.encipher(x)).collect::<Vec<_>>());
            let out = d.join(format!("{code}-{name}"));
            ok(&[
                "--languages", "cxa,cxb", "ingest", "--src", s(&src), "--tgt", s(&tgt), "--pair",
                &format!("es-{code}"), "--out", s(&out),
            ]);
            let rel = format!("{code}-{name}/corpus.json");
            if name == "train" { corpora.push(rel) } else { dev.push(rel) }
        }
    }
    let job = serde_json::json!({
        "run_id": "cli",
        "profile": "desk",
        "config": {"max_updates": 40, "valid_freq": 20, "batch_size": 4, "beam_size": 2},
        "shape": {"model_dim": 8, "ff_dim": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1, "max_positions": 64},
        "corpora": corpora,
        "dev": dev,
    });
    let path = d.join("job.json");
    std::fs::write(&path, serde_json::to_string_pretty(&job).unwrap()).unwrap();
    path
}

#[test]
fn train_select_translate_zeroshot_backtranslate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let job = synthetic_job(d);
    let run = d.join("run");
    let langs = ["--languages", "cxa,cxb"];
    let cmd = |rest: &[&str]| {
        let mut v: Vec<&str> = langs.to_vec();
        v.extend_from_slice(rest);
        ok(&v)
    };

    cmd(&["train", "--config", s(&job), "--out", s(&run), "--halt-after", "25"]);
    let partial = std::fs::read_to_string(run.join("snapshots.jsonl")).unwrap();
    assert_eq!(partial.lines().count(), 1);
    let record = cmd(&["train", "--config", s(&job), "--out", s(&run), "--seed", "1"]);
    assert_eq!(std::fs::read_to_string(run.join("snapshots.jsonl")).unwrap().lines().count(), 2);
    assert!(record.contains("\"run_id\": \"cli\""));

    let sel = cmd(&["select", "--strategy", "best-mean", "--run", s(&run)]);
    assert_eq!(sel, cmd(&["select", "--strategy", "best-mean", "--run", s(&run)]));
    let v: serde_json::Value = serde_json::from_str(&sel).unwrap();
    assert_eq!(v["strategy"], "best_mean");
    let ckpt = v["choices"]["cxa"]["checkpoints"][0].as_str().unwrap().to_string();

    let spec = d.join("ens.json");
    std::fs::write(&spec, serde_json::json!({"members": [ckpt, ckpt], "beam_size": 2}).to_string()).unwrap();
    let ens = cmd(&[
        "select", "--strategy", "ensemble", "--run", s(&run), "--candidate", s(&spec), "--dev",
        s(&d.join("cxa-dev/corpus.json")), "--dev", s(&d.join("cxb-dev/corpus.json")),
    ]);
    let e: serde_json::Value = serde_json::from_str(&ens).unwrap();
    assert_eq!(e["differs_from_baseline"].as_array().unwrap().len(), 0);

    let t = cmd(&[
        "translate", "--model", &ckpt, "--input", s(&d.join("cxa.dev.es")), "--target", "cxb", "--beam", "2",
        "--out", s(&d.join("tr")), "--jobs", "1",
    ]);
    assert!(t.contains("\"segments\": 10"));
    let hyps = std::fs::read_to_string(d.join("tr/hyp.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 10);

    let z = cmd(&[
        "zeroshot", "--model", &ckpt, "--column", &format!("es={}", s(&d.join("cxa.dev.es"))), "--column",
        &format!("cxa={}", s(&d.join("cxa.dev.cxa"))), "--column", &format!("cxb={}", s(&d.join("cxb.dev.cxb"))),
        "--direction", "es-cxb", "--direction", "cxa-cxb", "--beam", "2",
    ]);
    let zv: serde_json::Value = serde_json::from_str(&z).unwrap();
    assert_eq!(zv["table"].as_array().unwrap().len(), 2);
    assert_eq!(zv["table"][1]["column"], "cxa-cxb");

    let bt = cmd(&[
        "backtranslate", "--model", &ckpt, "--mono", s(&d.join("cxa.dev.cxa")), "--base",
        s(&d.join("cxa-train/corpus.json")), "--reverse-id", "rev-1", "--beam", "2", "--out", s(&d.join("bt")),
    ]);
    let b: serde_json::Value = serde_json::from_str(&bt).unwrap();
    assert_eq!(b["reverse_id"], "rev-1");
    assert_eq!(b["synthetic"].as_u64().unwrap() + b["errors"].as_array().unwrap().len() as u64, 10);
}

#[test]
fn ablate_writes_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let job = synthetic_job(d);
    let base: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&job).unwrap()).unwrap();
    let ablation = serde_json::json!({
        "base": base,
        "variants": [[], [{"toggle": "single_language", "value": "cxa"}]],
    });
    let path = d.join("ablate.json");
    std::fs::write(&path, ablation.to_string()).unwrap();
    let out = ok(&["--languages", "cxa,cxb", "ablate", "--config", s(&path), "--out", s(&d.join("abl"))]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["updates"], 40);
    assert_eq!(v["rows"][1]["run_id"], "single_language=cxa");
    assert!(d.join("abl/comparison.json").exists());
}
