use std::collections::BTreeMap;
use std::path::PathBuf;

use lrmt_core::corpus::{Corpus, LanguageCode, LanguagePair, Provenance};
use lrmt_core::decode::EnsembleSpec;
use lrmt_core::model::{init_random, Checkpoint, FreezeScope, TrainConfig, TransformerShape};
use lrmt_core::pipeline::{
    apply_toggles, backtranslate_with, checkpoint_dev_scores, compare_runs, ensemble_dev_scores, pick_ensembles,
    select_best_mean, select_best_per_language, train_run, train_run_until, updates_to_reach, zero_shot_eval,
    AblationBase, DevSet, Init, PipelineError, RunRecord, RunSpec, Snapshot, Strategy, Toggle, TrainData,
};
use lrmt_core::report::emit_report;
use lrmt_core::synthetic::{spanish_like_sentences, Cipher};

fn lang(c: &str) -> LanguageCode {
    LanguageCode::new(c).unwrap()
}

fn es() -> LanguageCode {
    lang("es")
}

/// Two small cipher languages with train and dev splits.
fn cipher_data(codes: [&str; 2], train: usize) -> (TrainData, Vec<Cipher>) {
    let sents = spanish_like_sentences(7, train + 10, 1, 2);
    let mut corpora = Vec::new();
    let mut dev = Vec::new();
    let mut ciphers = Vec::new();
    for (i, code) in codes.iter().enumerate() {
        let c = Cipher::random(code, 30 + i as u64).unwrap();
        corpora.push(c.corpus(&es(), &sents[..train], Provenance::Anlp23).unwrap());
        dev.push(DevSet::from_corpus(&c.corpus(&es(), &sents[train..], Provenance::Anlp23).unwrap()).unwrap());
        ciphers.push(c);
    }
    (TrainData::new(corpora, dev).unwrap(), ciphers)
}

fn tiny_spec(run_id: &str, updates: u64) -> RunSpec {
    let mut config = TrainConfig::desk(updates);
    config.batch_size = 4;
    config.beam_size = 2;
    RunSpec {
        run_id: run_id.into(),
        config,
        shape: TransformerShape::tiny(),
        init: Init::Random { seed: 3 },
    }
}

#[test]
fn desk_schedule_gives_five_snapshots_and_checkpoints() {
    let (data, _) = cipher_data(["pla", "plb"], 20);
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec("five", 1000);
    assert_eq!((spec.config.warmup_steps, spec.config.valid_freq), (100, 200));
    let run = train_run(dir.path(), &spec, &data).unwrap();
    let steps: Vec<u64> = run.snapshots.iter().map(|s| s.step).collect();
    assert_eq!(steps, [200, 400, 600, 800, 1000]);
    for s in &run.snapshots {
        assert!(run.checkpoint_path(s).exists());
        let mean = s.scores.values().sum::<f64>() / s.scores.len() as f64;
        assert!((s.mean - mean).abs() < 1e-12);
        assert_eq!(s.scores.len(), 2);
    }
    let ckpts = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 5);
    for f in ["config.json", "manifest.json", "vocab.json", "meta.json", "snapshots.jsonl", "reports/run.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert!(meta["validation"].as_str().unwrap().contains("valid_freq"));
    assert!(meta["threads"].as_u64().unwrap() >= 1);
    assert_eq!(meta["scale"].as_f64().unwrap(), 0.001);

    // every recorded score equals re-evaluation of its checkpoint
    let best = select_best_mean(&run).unwrap();
    for (l, choice) in &best.choices {
        let ckpt = Checkpoint::load(&choice.checkpoints[0]).unwrap();
        let again = checkpoint_dev_scores(&ckpt, &data.dev, spec.config.beam_size, None).unwrap();
        assert_eq!(again[l], choice.score);
    }
}

#[test]
fn killed_run_resumes_to_the_same_record() {
    let (data, _) = cipher_data(["pka", "pkb"], 16);
    let mut spec = tiny_spec("resume", 60);
    spec.config.valid_freq = 20;
    let full_dir = tempfile::tempdir().unwrap();
    let full = train_run(full_dir.path(), &spec, &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let partial = train_run_until(dir.path(), &spec, &data, Some(50)).unwrap();
    assert_eq!(partial.snapshots.len(), 2);
    let resumed = train_run(dir.path(), &spec, &data).unwrap();
    assert_eq!(resumed.snapshots, full.snapshots);
    assert_eq!(emit_report(&resumed).unwrap(), emit_report(&full).unwrap());
    let a = Checkpoint::load(&full.checkpoint_path(full.last().unwrap())).unwrap();
    let b = Checkpoint::load(&resumed.checkpoint_path(resumed.last().unwrap())).unwrap();
    assert_eq!(a.params, b.params);

    let mut other = spec.clone();
    other.config.seed = 99;
    assert!(matches!(
        train_run(dir.path(), &other, &data),
        Err(PipelineError::RunMismatch { .. })
    ));
}

#[test]
fn non_finite_loss_aborts_with_state_saved() {
    let (data, _) = cipher_data(["pna", "pnb"], 8);
    let mut spec = tiny_spec("boom", 200);
    spec.config.max_lr = 1e12;
    spec.config.warmup_steps = 1;
    spec.config.clip_norm = 1e12;
    let dir = tempfile::tempdir().unwrap();
    match train_run(dir.path(), &spec, &data) {
        Err(PipelineError::NonFiniteLoss { step, checkpoint }) => {
            let saved = Checkpoint::load(&checkpoint).unwrap();
            assert_eq!(saved.step, step - 1);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

fn snap(step: u64, scores: &[(&str, f64)]) -> Snapshot {
    let scores = scores.iter().map(|(l, s)| (lang(l), *s)).collect();
    Snapshot::new(step, scores, 1.0, PathBuf::from(format!("checkpoints/step-{step}.ckpt"))).unwrap()
}

fn record(run_id: &str, snapshots: Vec<Snapshot>) -> RunRecord {
    RunRecord {
        run_id: run_id.into(),
        config: TrainConfig::default(),
        manifest: Default::default(),
        snapshots,
        dir: PathBuf::from(run_id),
    }
}

#[test]
fn best_mean_selection() {
    let run = record(
        "a",
        vec![snap(1, &[("quy", 20.0)]), snap(2, &[("quy", 31.0)]), snap(3, &[("quy", 30.0)])],
    );
    let r = select_best_mean(&run).unwrap();
    assert_eq!(r.strategy, Strategy::BestMean);
    assert_eq!(r.choices[&lang("quy")].step, Some(2));
    assert_eq!(r.mean, Some(31.0));

    let tie = record("t", vec![snap(5, &[("gn", 30.0)]), snap(6, &[("gn", 30.0)])]);
    assert_eq!(select_best_mean(&tie).unwrap().choices[&lang("gn")].step, Some(5));

    let single = record("s", vec![snap(9, &[("gn", 1.0), ("quy", 3.0)])]);
    let r = select_best_mean(&single).unwrap();
    assert_eq!(r.mean, Some(2.0));
    assert_eq!(r.choices[&lang("gn")].checkpoints, [PathBuf::from("s/checkpoints/step-9.ckpt")]);

    assert!(matches!(select_best_mean(&record("e", vec![])), Err(PipelineError::NoSnapshots)));
}

#[test]
fn per_language_selection_marks_differing_languages() {
    let a = record("a", vec![snap(1, &[("gn", 30.0), ("quy", 40.0), ("shp", 20.0)])]);
    let b = record("b", vec![snap(1, &[("gn", 29.0), ("quy", 35.0), ("shp", 25.0)])]);
    let runs = [a.clone(), b];
    let r = select_best_per_language(&runs).unwrap();
    assert_eq!(r.choices[&lang("gn")].run_id, "a");
    assert_eq!(r.choices[&lang("quy")].run_id, "a");
    assert_eq!(r.choices[&lang("shp")].run_id, "b");
    assert_eq!(r.differs_from_baseline, [lang("shp")]);

    let one = select_best_per_language(std::slice::from_ref(&a)).unwrap();
    assert!(one.differs_from_baseline.is_empty());
    assert!(one.choices.values().all(|c| c.step == Some(1) && c.run_id == "a"));
}

#[test]
fn table_like_fixture_has_different_winners_and_dominates_best_mean() {
    // four runs with several snapshots; each language peaks somewhere else
    let langs = ["aym", "bzd", "cni", "gn", "quy", "shp"];
    let mut runs = Vec::new();
    for r in 0..4u64 {
        let snaps = (1..=3u64)
            .map(|s| {
                let scores: Vec<(&str, f64)> = langs
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (*l, 20.0 + ((i as u64 * 7 + r * 5 + s * 3) % 11) as f64))
                    .collect();
                snap(s * 100, &scores)
            })
            .collect();
        runs.push(record(&format!("run{r}"), snaps));
    }
    let per = select_best_per_language(&runs).unwrap();
    let mean = lrmt_core::pipeline::select_best_mean_across(&runs).unwrap();
    for l in langs {
        assert!(per.choices[&lang(l)].score >= mean.choices[&lang(l)].score);
    }
    let winners: std::collections::BTreeSet<_> = per.choices.values().map(|c| (&c.run_id, c.step)).collect();
    assert!(winners.len() > 1);
    assert!(!per.differs_from_baseline.is_empty());
}

#[test]
fn ensembles_are_adopted_only_on_strict_improvement() {
    let base = select_best_per_language(&[record("a", vec![snap(1, &[("gn", 30.0), ("quy", 40.0)])])]).unwrap();
    let specs: Vec<EnsembleSpec> = (0..3).map(|i| EnsembleSpec::new(vec![PathBuf::from(format!("m{i}"))])).collect();
    let fixed = |scores: Vec<[f64; 2]>| {
        move |spec: &EnsembleSpec| {
            let i: usize = spec.members[0].to_str().unwrap()[1..].parse().unwrap();
            Ok(BTreeMap::from([(lang("gn"), scores[i][0]), (lang("quy"), scores[i][1])]))
        }
    };
    // ties are not improvements
    let r = pick_ensembles(&specs, &base, fixed(vec![[30.0, 40.0], [29.0, 39.0], [30.0, 12.0]])).unwrap();
    assert_eq!(r.choices, base.choices);
    assert!(r.differs_from_baseline.is_empty());

    // one candidate beats the baseline on one language only
    let r = pick_ensembles(&specs, &base, fixed(vec![[29.0, 39.0], [30.5, 38.0], [30.2, 40.0]])).unwrap();
    assert_eq!(r.differs_from_baseline, [lang("gn")]);
    assert_eq!(r.choices[&lang("gn")].run_id, "ensemble-2");
    assert_eq!(r.choices[&lang("gn")].score, 30.5);
    assert_eq!(r.choices[&lang("quy")], base.choices[&lang("quy")]);
    assert_eq!(r.strategy, Strategy::Ensemble);
    for (l, c) in &r.choices {
        assert!(c.score >= base.choices[l].score);
    }
}

#[test]
fn ensemble_of_identical_members_is_never_adopted_over_its_member() {
    let (data, _) = cipher_data(["pea", "peb"], 12);
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec("ens", 40);
    spec.config.valid_freq = 40;
    let run = train_run(dir.path(), &spec, &data).unwrap();
    let base = select_best_mean(&run).unwrap();
    let member = base.choices[&lang("pea")].checkpoints[0].clone();
    let mut ens = EnsembleSpec::new(vec![member.clone(), member.clone()]);
    ens.beam_size = spec.config.beam_size;
    let scores = ensemble_dev_scores(&ens, &data.dev, None).unwrap();
    for (l, c) in &base.choices {
        assert_eq!(scores[l], c.score);
    }
    let r = pick_ensembles(&[ens], &base, |s| ensemble_dev_scores(s, &data.dev, None)).unwrap();
    assert_eq!(r.choices, base.choices);
}

#[test]
fn backtranslation_adds_one_synthetic_pair_per_line() {
    let cipher = Cipher::random("pbx", 5).unwrap();
    let x = lang("pbx");
    let sents = spanish_like_sentences(2, 30, 1, 2);
    let base = cipher.corpus(&es(), &sents[..10], Provenance::Anlp23).unwrap();
    let vocab = lrmt_core::codec::build_vocab(&[&base], 1).unwrap();
    let model = init_random(TransformerShape::tiny(), &vocab, TrainConfig::default(), 4).unwrap();
    let mono: Vec<String> = sents[10..].iter().map(|s| cipher.encipher(s)).collect();
    let bt = backtranslate_with(&mono, &model, &vocab, &base, "reverse-1", 2, 20).unwrap();
    assert!(bt.errors.is_empty(), "{:?}", bt.errors);
    assert_eq!(bt.synthetic, mono.len());
    assert_eq!(bt.corpus.len(), base.len() + mono.len());
    assert_eq!(&bt.corpus.pairs()[..base.len()], base.pairs());
    let pair = LanguagePair::new(es(), x);
    assert_eq!(bt.manifest.count(&pair, &Provenance::Backtrans), 20);
    assert_eq!(bt.manifest.count(&pair, &Provenance::Anlp23), 10);
    assert!(bt.corpus.pairs()[base.len()..]
        .iter()
        .zip(&mono)
        .all(|(p, m)| p.provenance == Provenance::Backtrans && &p.target == m));
    assert_eq!(bt.reverse_id, "reverse-1");
}

#[test]
fn zero_shot_report_shape_and_missing_tag() {
    let (data, ciphers) = cipher_data(["pza", "pzb"], 10);
    let vocab = data.vocabulary().unwrap();
    let model = init_random(TransformerShape::tiny(), &vocab, TrainConfig::default(), 4).unwrap();
    let rows = spanish_like_sentences(11, 4, 1, 2);
    let mut mp = BTreeMap::from([(es(), rows.clone())]);
    for c in &ciphers {
        mp.insert(c.language.clone(), rows.iter().map(|r| c.encipher(r)).collect());
    }
    let dirs = [(es(), lang("pza")), (lang("pzb"), lang("pza"))];
    let r = zero_shot_eval(&model, &vocab, &mp, &dirs, 2, None).unwrap();
    let cols: Vec<&str> = r.table.iter().map(|c| c.column.as_str()).collect();
    assert_eq!(cols, ["es-pza", "pzb-pza"]);
    assert!(r.directions.iter().all(|d| d.rows == 4 && d.hypotheses.len() == 4));

    let unknown = lrmt_core::corpus::register_language("pzq").unwrap();
    mp.insert(unknown.clone(), rows.clone());
    assert!(matches!(
        zero_shot_eval(&model, &vocab, &mp, &[(es(), unknown)], 2, None),
        Err(PipelineError::MissingTag(_))
    ));
}

#[test]
fn toggles_reshape_the_run() {
    let (mut data, _) = cipher_data(["pta", "ptb"], 10);
    let pair_a = LanguagePair::new(es(), lang("pta"));
    let extra = Corpus::from_texts(pair_a.clone(), Provenance::Bibles, [("la casa.", "xx")]).unwrap();
    let mut merged = data.corpora[&pair_a].clone();
    for p in extra.pairs() {
        merged.push(p.clone()).unwrap();
    }
    data.corpora.insert(pair_a.clone(), merged);
    let base = AblationBase {
        config: TrainConfig::desk(100),
        shape: TransformerShape::tiny(),
        init: Init::Checkpoint {
            path: PathBuf::from("pretrained.ckpt"),
        },
        data,
    };

    let (spec, d) = apply_toggles(&base, &[Toggle::SingleLanguage(lang("ptb"))]).unwrap();
    assert_eq!(d.manifest().totals().len(), 1);
    assert_eq!(d.dev.keys().collect::<Vec<_>>(), [&lang("ptb")]);
    assert_eq!(spec.run_id, "single_language=ptb");

    let drop = Toggle::IncludeSource {
        provenance: Provenance::Bibles,
        include: false,
    };
    let (_, d) = apply_toggles(&base, &[drop.clone()]).unwrap();
    assert_eq!(d.manifest().count(&pair_a, &Provenance::Bibles), 0);
    assert_eq!(base.data.manifest().count(&pair_a, &Provenance::Bibles), 1);

    let (spec, _) = apply_toggles(&base, &[Toggle::RandomInit, Toggle::FreezeScope(FreezeScope::DecoderOnly)]).unwrap();
    assert_eq!(spec.init, Init::Random { seed: 1 });
    assert_eq!(spec.config.freeze_scope, FreezeScope::DecoderOnly);
    assert_eq!(spec.run_id, "random_init+freeze=decoder_only");
}

#[test]
fn comparisons_use_matched_update_counts() {
    let a = record("a", vec![snap(100, &[("gn", 10.0)]), snap(200, &[("gn", 81.04)]), snap(300, &[("gn", 90.0)])]);
    let b = record("b", vec![snap(100, &[("gn", 5.0)]), snap(200, &[("gn", 60.0)])]);
    let t = compare_runs(&[a.clone(), b.clone()], &[vec![], vec![Toggle::RandomInit]]).unwrap();
    assert_eq!(t.updates, 200);
    assert_eq!(t.rows[0].scores[&lang("gn")], 81.04);
    let json = emit_report(&t).unwrap();
    assert!(json.contains("\"gn\": 81.0"), "{json}");
    assert!(json.contains("random_init"));
    assert_eq!(updates_to_reach(&a, &lang("gn"), 80.0), Some(200));
    assert_eq!(updates_to_reach(&b, &lang("gn"), 80.0), None);
    assert!(compare_runs(&[a, record("c", vec![snap(7, &[("gn", 1.0)])])], &[vec![], vec![]]).is_err());
}
