//! Training runs with periodic dev validation, checkpoint and ensemble
//! selection, backtranslation, zero-shot evaluation and ablations.
//!
//! A run directory holds `config.json`, `manifest.json`, `vocab.json`,
//! `meta.json`, `snapshots.jsonl`, `checkpoints/step-N.ckpt` and
//! `reports/*.json`. One process writes a given directory at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{build_vocab, encode_pair, CodecError, Vocabulary};
use crate::corpus::{
    self, CharTable, Corpus, CorpusError, LanguageCode, LanguagePair, Manifest, Provenance, SentencePair,
};
use crate::decode::{translate_corpus, DecodeError, EnsembleSpec, Ensemble, SegmentError, StepModel};
use crate::metrics::{corpus_chrf, macro_mean_all, ChrfParams, MetricsError};
use crate::model::{
    extend_embeddings, init_random, Batch, Checkpoint, FreezeScope, InitPolicy, ModelError, TrainConfig,
    TransformerShape,
};
use crate::report::{chrf1, chrf1_map, chrf4, write_report};
use crate::sampler::{draw_batch, PairDistribution, SamplerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no training corpora")]
    NoCorpora,
    #[error("no dev set for language {0}")]
    MissingDev(LanguageCode),
    #[error("language {0} has no tag in the model vocabulary")]
    MissingTag(LanguageCode),
    #[error("run has no snapshots")]
    NoSnapshots,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("run directory {dir} holds a different run: {reason}")]
    RunMismatch { dir: PathBuf, reason: String },
    #[error("non-finite loss at step {step}; state saved to {}", checkpoint.display())]
    NonFiniteLoss { step: u64, checkpoint: PathBuf },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Aligned dev sources and references for one direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevSet {
    pub pair: LanguagePair,
    pub sources: Vec<String>,
    pub references: Vec<String>,
}

impl DevSet {
    pub fn new(pair: LanguagePair, sources: Vec<String>, references: Vec<String>) -> Result<Self> {
        if sources.is_empty() || sources.len() != references.len() {
            return Err(PipelineError::Invalid(format!(
                "dev set {pair} needs equal nonzero sources and references ({} vs {})",
                sources.len(),
                references.len()
            )));
        }
        Ok(Self {
            pair,
            sources,
            references,
        })
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        Self::new(
            corpus.pair().clone(),
            corpus.sources().map(str::to_string).collect(),
            corpus.targets().map(str::to_string).collect(),
        )
    }
}

/// Training corpora (one per language pair) and dev sets keyed by target
/// language.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub corpora: BTreeMap<LanguagePair, Corpus>,
    pub dev: BTreeMap<LanguageCode, DevSet>,
    /// Applied to hypotheses whose target is `czn` before scoring.
    pub czn_table: Option<CharTable>,
}

impl TrainData {
    /// Corpora sharing a language pair are concatenated in order.
    pub fn new(corpora: Vec<Corpus>, dev: Vec<DevSet>) -> Result<Self> {
        let mut grouped: BTreeMap<LanguagePair, Vec<Corpus>> = BTreeMap::new();
        for c in corpora.into_iter().filter(|c| !c.is_empty()) {
            grouped.entry(c.pair().clone()).or_default().push(c);
        }
        let mut data = TrainData::default();
        for (pair, group) in grouped {
            data.corpora.insert(pair, corpus::merge(&group, false)?.0);
        }
        for d in dev {
            data.dev.insert(d.pair.target.clone(), d);
        }
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            return Err(PipelineError::NoCorpora);
        }
        for pair in self.corpora.keys() {
            if !self.dev.contains_key(&pair.target) {
                return Err(PipelineError::MissingDev(pair.target.clone()));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::from_corpora(self.corpora.values())
    }

    fn languages(&self) -> Vec<LanguageCode> {
        let mut langs = BTreeSet::new();
        for pair in self.corpora.keys().chain(self.dev.values().map(|d| &d.pair)) {
            langs.insert(pair.source.clone());
            langs.insert(pair.target.clone());
        }
        langs.into_iter().collect()
    }

    /// Character vocabulary of the training corpora plus every language tag.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let refs: Vec<&Corpus> = self.corpora.values().collect();
        Ok(build_vocab(&refs, 1)?.extend_with_tags(&self.languages()))
    }

    /// `base` with any missing tags and training characters appended.
    pub fn extend_vocabulary(&self, base: &Vocabulary) -> Vocabulary {
        let chars = self
            .corpora
            .values()
            .flat_map(|c| c.pairs())
            .flat_map(|p| p.source.chars().chain(p.target.chars()))
            .collect::<Vec<char>>();
        base.extend_with_tags(&self.languages()).extend_with_chars(chars)
    }
}

/// Where a run's parameters start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    Random { seed: u64 },
    /// Continue from a trained checkpoint; optimizer state is reset and the
    /// vocabulary extended where the data needs it.
    Checkpoint { path: PathBuf },
}

/// Everything that defines a run; stored as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_id: String,
    pub config: TrainConfig,
    pub shape: TransformerShape,
    pub init: Init,
}

/// One validation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub scores: BTreeMap<LanguageCode, f64>,
    /// Macro mean of `scores`.
    pub mean: f64,
    /// Label-smoothed dev loss.
    pub loss: f64,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
}

impl Snapshot {
    pub fn new(step: u64, scores: BTreeMap<LanguageCode, f64>, loss: f64, checkpoint: PathBuf) -> Result<Self> {
        let mean = macro_mean_all(&scores)?;
        Ok(Self {
            step,
            scores,
            mean,
            loss,
            checkpoint,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub manifest: Manifest,
    /// Ordered by step.
    pub snapshots: Vec<Snapshot>,
    #[serde(skip)]
    pub dir: PathBuf,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let spec: RunSpec = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        Ok(Self {
            run_id: spec.run_id,
            config: spec.config,
            manifest,
            snapshots: read_snapshots(dir)?,
            dir: dir.to_path_buf(),
        })
    }

    pub fn checkpoint_path(&self, snapshot: &Snapshot) -> PathBuf {
        self.dir.join(&snapshot.checkpoint)
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }
}

fn read_snapshots(dir: &Path) -> Result<Vec<Snapshot>> {
    let path = dir.join("snapshots.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_snapshots(dir: &Path, snapshots: &[Snapshot]) -> Result<()> {
    let mut text = String::new();
    for s in snapshots {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    fs::write(dir.join("snapshots.jsonl"), text)?;
    Ok(())
}

fn append_snapshot(dir: &Path, snapshot: &Snapshot) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("snapshots.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(snapshot)?)?;
    f.sync_data()?;
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let ckdir = dir.join("checkpoints");
    if !ckdir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(ckdir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Longest output considered for `sources`: twice the longest input plus 10.
pub fn decode_max_len(sources: &[String]) -> usize {
    2 * sources.iter().map(|s| s.chars().count()).max().unwrap_or(0) + 10
}

/// Corpus chrF per dev language, decoding with beam `beam`. Outputs are
/// capped at `max_len` tokens and at [`decode_max_len`] of each dev set.
pub fn evaluate_dev<M: StepModel>(
    model: &M,
    vocab: &Vocabulary,
    dev: &BTreeMap<LanguageCode, DevSet>,
    beam: usize,
    max_len: usize,
    czn_table: Option<&CharTable>,
) -> Result<BTreeMap<LanguageCode, f64>> {
    let params = ChrfParams::default();
    let mut scores = BTreeMap::new();
    for (lang, d) in dev {
        vocab
            .tag_id(lang)
            .map_err(|_| PipelineError::MissingTag(lang.clone()))?;
        let len = max_len.min(decode_max_len(&d.sources));
        let out = translate_corpus(model, vocab, &d.sources, lang, beam, len, czn_table);
        scores.insert(lang.clone(), corpus_chrf(&out.hypotheses, &d.references, &params)?.score);
    }
    Ok(scores)
}

fn dev_loss(state: &Checkpoint, dev: &BTreeMap<LanguageCode, DevSet>) -> Result<f64> {
    let mut batches = Vec::new();
    for d in dev.values() {
        let seqs = d
            .sources
            .iter()
            .zip(&d.references)
            .map(|(s, r)| Ok((state.vocab.encode_source(s, &d.pair.target)?, state.vocab.encode_target(r))))
            .collect::<Result<Vec<_>>>()?;
        for chunk in seqs.chunks(32) {
            batches.push(Batch::from_sequences(chunk)?);
        }
    }
    Ok(state.eval_loss(&batches)?)
}

fn initial_state(spec: &RunSpec, data: &TrainData) -> Result<Checkpoint> {
    match &spec.init {
        Init::Random { seed } => Ok(init_random(spec.shape, &data.vocabulary()?, spec.config.clone(), *seed)?),
        Init::Checkpoint { path } => {
            let mut base = Checkpoint::load(path)?;
            if *base.shape() != spec.shape {
                return Err(PipelineError::Invalid(format!(
                    "{} has shape {:?}, run expects {:?}",
                    path.display(),
                    base.shape(),
                    spec.shape
                )));
            }
            let vocab = data.extend_vocabulary(&base.vocab);
            if vocab != base.vocab {
                base = extend_embeddings(&base, &vocab, InitPolicy::default())?;
            }
            base.meta.clear();
            base.reset_training(spec.config.clone())?;
            Ok(base)
        }
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    run_id: &'a str,
    scale: f64,
    overrides: &'a [String],
    validation: &'static str,
    threads: usize,
    sampler: &'a PairDistribution,
    vocab_size: usize,
    vocab_fingerprint: String,
    num_params: usize,
}

/// Trains `spec` on `data` in `dir`, validating every `valid_freq` updates
/// and at the last update. An existing directory for the same spec is
/// resumed from its latest checkpoint.
pub fn train_run(dir: &Path, spec: &RunSpec, data: &TrainData) -> Result<RunRecord> {
    train_run_until(dir, spec, data, None)
}

/// [`train_run`] that stops once `halt_after` updates are done, as if the
/// process had been killed there. Work since the last checkpoint is lost.
pub fn train_run_until(dir: &Path, spec: &RunSpec, data: &TrainData, halt_after: Option<u64>) -> Result<RunRecord> {
    let cfg = &spec.config;
    cfg.validate()?;
    spec.shape.validate()?;
    data.validate()?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    let manifest = data.manifest();

    let config_path = dir.join("config.json");
    if config_path.exists() {
        let existing: RunSpec = serde_json::from_str(&fs::read_to_string(&config_path)?)?;
        if existing != *spec {
            return Err(PipelineError::RunMismatch {
                dir: dir.to_path_buf(),
                reason: "config.json differs".into(),
            });
        }
        let recorded: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if recorded != manifest {
            return Err(PipelineError::RunMismatch {
                dir: dir.to_path_buf(),
                reason: "manifest.json differs".into(),
            });
        }
    } else {
        write_report(&dir.join("manifest.json"), &manifest)?;
        write_report(&config_path, spec)?;
    }

    let mut state = match latest_checkpoint(dir)? {
        Some((_, path)) => Checkpoint::load(&path)?,
        None => initial_state(spec, data)?,
    };
    let vocab = state.vocab.clone();
    vocab.save(&dir.join("vocab.json"))?;
    let mut snapshots = read_snapshots(dir)?;
    snapshots.retain(|s| s.step <= state.step);
    write_snapshots(dir, &snapshots)?;

    let dist = PairDistribution::from_sizes(&manifest.totals(), cfg.pair_temperature)?;
    write_report(
        &dir.join("meta.json"),
        &RunMeta {
            run_id: &spec.run_id,
            scale: cfg.max_updates as f64 / TrainConfig::default().max_updates as f64,
            overrides: &cfg.overrides,
            validation: "every valid_freq updates and at the last update; sampled training has no epochs",
            threads: rayon::current_num_threads(),
            sampler: &dist,
            vocab_size: vocab.len(),
            vocab_fingerprint: vocab.fingerprint_hex(),
            num_params: state.params.len(),
        },
    )?;

    while state.step < cfg.max_updates && halt_after.is_none_or(|h| state.step < h) {
        let mut batches = Vec::with_capacity(cfg.update_freq);
        for _ in 0..cfg.update_freq {
            let (_, items) = draw_batch(&mut state.rng, &data.corpora, &dist, cfg.batch_size)?;
            let seqs = items
                .iter()
                .map(|sp| encode_pair(sp, &vocab))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            batches.push(Batch::from_sequences(&seqs)?);
        }
        match state.train_step(&batches) {
            Ok(_) => {}
            Err(ModelError::NonFiniteLoss { step }) => {
                let path = dir.join("checkpoints").join(format!("abort-step-{step}.ckpt"));
                state.save(&path)?;
                return Err(PipelineError::NonFiniteLoss { step, checkpoint: path });
            }
            Err(e) => return Err(e.into()),
        }
        if state.step % cfg.valid_freq == 0 || state.step == cfg.max_updates {
            let scores = evaluate_dev(&state, &vocab, &data.dev, cfg.beam_size, usize::MAX, data.czn_table.as_ref())?;
            let loss = dev_loss(&state, &data.dev)?;
            let rel = PathBuf::from("checkpoints").join(format!("step-{}.ckpt", state.step));
            let snapshot = Snapshot::new(state.step, scores, loss, rel.clone())?;
            // snapshot first: a crash before the checkpoint lands is undone on resume
            append_snapshot(dir, &snapshot)?;
            state.meta.insert("run_id".into(), spec.run_id.clone().into());
            state.save(&dir.join(rel))?;
        }
    }

    let record = RunRecord::load(dir)?;
    if state.step >= cfg.max_updates {
        write_report(&dir.join("reports").join("run.json"), &record)?;
    }
    Ok(record)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BestMean,
    BestPerLanguage,
    Ensemble,
}

/// The artifact chosen for one language and its dev score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub run_id: String,
    /// `None` for ensembles.
    pub step: Option<u64>,
    pub checkpoints: Vec<PathBuf>,
    #[serde(serialize_with = "chrf4")]
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub choices: BTreeMap<LanguageCode, Choice>,
    /// Macro mean of the chosen scores.
    #[serde(serialize_with = "chrf4_opt")]
    pub mean: Option<f64>,
    /// Languages whose choice differs from the baseline: the best-mean
    /// checkpoint for per-language selection, the given baseline for
    /// ensembles.
    pub differs_from_baseline: Vec<LanguageCode>,
}

fn chrf4_opt<S: serde::Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => chrf4(v, s),
        None => s.serialize_none(),
    }
}

impl SelectionReport {
    fn new(strategy: Strategy, choices: BTreeMap<LanguageCode, Choice>, differs: Vec<LanguageCode>) -> Self {
        let scores: BTreeMap<LanguageCode, f64> = choices.iter().map(|(l, c)| (l.clone(), c.score)).collect();
        Self {
            strategy,
            mean: macro_mean_all(&scores).ok(),
            choices,
            differs_from_baseline: differs,
        }
    }
}

fn choice(run: &RunRecord, snap: &Snapshot, lang: &LanguageCode) -> Choice {
    Choice {
        run_id: run.run_id.clone(),
        step: Some(snap.step),
        checkpoints: vec![run.checkpoint_path(snap)],
        score: snap.scores[lang],
    }
}

fn best_mean_snapshot(runs: &[RunRecord]) -> Result<(&RunRecord, &Snapshot)> {
    let mut best: Option<(&RunRecord, &Snapshot)> = None;
    for run in runs {
        for snap in &run.snapshots {
            let better = match best {
                None => true,
                Some((_, b)) => snap.mean > b.mean || (snap.mean == b.mean && snap.step < b.step),
            };
            if better {
                best = Some((run, snap));
            }
        }
    }
    best.ok_or(PipelineError::NoSnapshots)
}

/// The snapshot with the highest mean dev chrF; ties go to the earliest step.
pub fn select_best_mean(run: &RunRecord) -> Result<SelectionReport> {
    select_best_mean_across(std::slice::from_ref(run))
}

/// [`select_best_mean`] over several runs; equal means and steps keep the
/// earlier run.
pub fn select_best_mean_across(runs: &[RunRecord]) -> Result<SelectionReport> {
    let (run, snap) = best_mean_snapshot(runs)?;
    let choices = snap.scores.keys().map(|l| (l.clone(), choice(run, snap, l))).collect();
    Ok(SelectionReport {
        strategy: Strategy::BestMean,
        choices,
        mean: Some(snap.mean),
        differs_from_baseline: Vec::new(),
    })
}

/// Per language, the (run, snapshot) with the highest dev chrF for that
/// language; ties go to the earliest step, then the earlier run.
pub fn select_best_per_language(runs: &[RunRecord]) -> Result<SelectionReport> {
    let (mean_run, mean_snap) = best_mean_snapshot(runs)?;
    let langs: BTreeSet<&LanguageCode> = runs
        .iter()
        .flat_map(|r| r.snapshots.iter().flat_map(|s| s.scores.keys()))
        .collect();
    let mut choices = BTreeMap::new();
    let mut differs = Vec::new();
    for lang in langs {
        let mut best: Option<(&RunRecord, &Snapshot)> = None;
        for run in runs {
            for snap in run.snapshots.iter().filter(|s| s.scores.contains_key(lang)) {
                let better = match best {
                    None => true,
                    Some((_, b)) => {
                        let (x, y) = (snap.scores[lang], b.scores[lang]);
                        x > y || (x == y && snap.step < b.step)
                    }
                };
                if better {
                    best = Some((run, snap));
                }
            }
        }
        let (run, snap) = best.expect("language came from some snapshot");
        if !(std::ptr::eq(run, mean_run) && snap.step == mean_snap.step) {
            differs.push(lang.clone());
        }
        choices.insert(lang.clone(), choice(run, snap, lang));
    }
    Ok(SelectionReport::new(Strategy::BestPerLanguage, choices, differs))
}

/// Per language, adopts the best-scoring candidate ensemble only when it
/// strictly beats the baseline's score; `evaluate` returns a candidate's
/// dev chrF per language. Each candidate is evaluated once.
pub fn pick_ensembles<F>(candidates: &[EnsembleSpec], baseline: &SelectionReport, mut evaluate: F) -> Result<SelectionReport>
where
    F: FnMut(&EnsembleSpec) -> Result<BTreeMap<LanguageCode, f64>>,
{
    let evaluated = candidates.iter().map(&mut evaluate).collect::<Result<Vec<_>>>()?;
    let mut choices = baseline.choices.clone();
    let mut differs = Vec::new();
    for (lang, base) in &baseline.choices {
        let mut best: Option<(usize, f64)> = None;
        for (i, scores) in evaluated.iter().enumerate() {
            if let Some(&s) = scores.get(lang) {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
        }
        if let Some((i, score)) = best.filter(|&(_, s)| s > base.score) {
            choices.insert(
                lang.clone(),
                Choice {
                    run_id: format!("ensemble-{}", i + 1),
                    step: None,
                    checkpoints: candidates[i].members.clone(),
                    score,
                },
            );
            differs.push(lang.clone());
        }
    }
    Ok(SelectionReport::new(Strategy::Ensemble, choices, differs))
}

/// Dev chrF per language for an ensemble spec, decoded with its own beam
/// size and length cap.
pub fn ensemble_dev_scores(
    spec: &EnsembleSpec,
    dev: &BTreeMap<LanguageCode, DevSet>,
    czn_table: Option<&CharTable>,
) -> Result<BTreeMap<LanguageCode, f64>> {
    let members = spec.load()?;
    let vocab = members[0].vocab.clone();
    let ensemble = Ensemble::new(members.iter().collect(), spec.combination)?;
    evaluate_dev(&ensemble, &vocab, dev, spec.beam_size, spec.max_len, czn_table)
}

/// Dev chrF per language for one checkpoint decoded with beam `beam`.
pub fn checkpoint_dev_scores(
    ckpt: &Checkpoint,
    dev: &BTreeMap<LanguageCode, DevSet>,
    beam: usize,
    czn_table: Option<&CharTable>,
) -> Result<BTreeMap<LanguageCode, f64>> {
    evaluate_dev(ckpt, &ckpt.vocab, dev, beam, usize::MAX, czn_table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backtranslation {
    /// Base pairs followed by the synthetic ones.
    pub corpus: Corpus,
    pub manifest: Manifest,
    pub synthetic: usize,
    /// Which reverse model produced the synthetic sources.
    pub reverse_id: String,
    /// Monolingual lines that yielded no usable translation.
    pub errors: Vec<SegmentError>,
}

/// Translates monolingual `mono` lines (the target language of `base`) into
/// `base`'s source language with `model`, pairs each hypothesis with its
/// line under provenance `backtrans`, and appends them to `base`.
pub fn backtranslate_with<M: StepModel>(
    mono: &[String],
    model: &M,
    vocab: &Vocabulary,
    base: &Corpus,
    reverse_id: &str,
    beam: usize,
    max_len: usize,
) -> Result<Backtranslation> {
    let pair = base.pair().clone();
    vocab
        .tag_id(&pair.source)
        .map_err(|_| PipelineError::MissingTag(pair.source.clone()))?;
    let len = max_len.min(decode_max_len(mono));
    let out = translate_corpus(model, vocab, mono, &pair.source, beam, len, None);
    let failed: BTreeMap<usize, &SegmentError> = out.errors.iter().map(|e| (e.index, e)).collect();
    let mut synthetic = Corpus::new(pair.clone());
    let mut errors = Vec::new();
    for (index, (hyp, line)) in out.hypotheses.iter().zip(mono).enumerate() {
        if let Some(e) = failed.get(&index) {
            errors.push((*e).clone());
            continue;
        }
        match SentencePair::new(hyp.as_str(), line.as_str(), pair.clone(), Provenance::Backtrans) {
            Ok(sp) => synthetic.push(sp)?,
            Err(e) => errors.push(SegmentError {
                index,
                message: e.to_string(),
            }),
        }
    }
    let n = synthetic.len();
    let (corpus, manifest) = corpus::merge(&[base.clone(), synthetic], false)?;
    Ok(Backtranslation {
        corpus,
        manifest,
        synthetic: n,
        reverse_id: reverse_id.to_string(),
        errors,
    })
}

/// [`backtranslate_with`] using the reverse ensemble described by `spec`.
pub fn backtranslate_expand(mono: &[String], spec: &EnsembleSpec, base: &Corpus, reverse_id: &str) -> Result<Backtranslation> {
    let members = spec.load()?;
    let vocab = members[0].vocab.clone();
    let ensemble = Ensemble::new(members.iter().collect(), spec.combination)?;
    backtranslate_with(mono, &ensemble, &vocab, base, reverse_id, spec.beam_size, spec.max_len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub source: LanguageCode,
    pub target: LanguageCode,
    #[serde(serialize_with = "chrf4")]
    pub score: f64,
    /// chrF of all-empty hypotheses against the same references.
    #[serde(serialize_with = "chrf4")]
    pub empty_baseline: f64,
    pub rows: usize,
    pub nonempty: usize,
    pub errors: usize,
    pub hypotheses: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub column: String,
    #[serde(serialize_with = "chrf1")]
    pub chrf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    /// One column per direction, in request order, labelled `src-tgt`.
    pub table: Vec<TableCell>,
    pub directions: Vec<DirectionScore>,
}

/// Scores each `(source, target)` direction on row-aligned multiparallel
/// dev data, decoding the source column with the target tag whether or not
/// the direction was trained.
pub fn zero_shot_eval<M: StepModel>(
    model: &M,
    vocab: &Vocabulary,
    multiparallel: &BTreeMap<LanguageCode, Vec<String>>,
    directions: &[(LanguageCode, LanguageCode)],
    beam: usize,
    czn_table: Option<&CharTable>,
) -> Result<ZeroShotReport> {
    let rows = multiparallel.values().next().map(Vec::len).unwrap_or(0);
    if rows == 0 || multiparallel.values().any(|c| c.len() != rows) {
        return Err(PipelineError::Invalid("multiparallel dev columns must be nonempty and aligned".into()));
    }
    let params = ChrfParams::default();
    let column = |l: &LanguageCode| {
        multiparallel
            .get(l)
            .ok_or_else(|| PipelineError::Invalid(format!("no dev column for {l}")))
    };
    let mut report = ZeroShotReport {
        table: Vec::new(),
        directions: Vec::new(),
    };
    for (src, tgt) in directions {
        vocab.tag_id(tgt).map_err(|_| PipelineError::MissingTag(tgt.clone()))?;
        let (sources, refs) = (column(src)?, column(tgt)?);
        let out = translate_corpus(model, vocab, sources, tgt, beam, decode_max_len(sources), czn_table);
        let score = corpus_chrf(&out.hypotheses, refs, &params)?.score;
        let empty = vec![String::new(); rows];
        let empty_baseline = corpus_chrf(&empty, refs, &params)?.score;
        report.table.push(TableCell {
            column: format!("{src}-{tgt}"),
            chrf: score,
        });
        report.directions.push(DirectionScore {
            source: src.clone(),
            target: tgt.clone(),
            score,
            empty_baseline,
            rows,
            nonempty: out.hypotheses.iter().filter(|h| !h.trim().is_empty()).count(),
            errors: out.errors.len(),
            hypotheses: out.hypotheses,
        });
    }
    Ok(report)
}

/// One change relative to an ablation's base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "toggle", content = "value")]
pub enum Toggle {
    /// Train and validate on the pairs targeting this language only.
    SingleLanguage(LanguageCode),
    /// Start from random parameters instead of the base checkpoint.
    RandomInit,
    /// Keep or drop every pair of one provenance.
    IncludeSource { provenance: Provenance, include: bool },
    FreezeScope(FreezeScope),
}

impl Toggle {
    pub fn label(&self) -> String {
        match self {
            Toggle::SingleLanguage(l) => format!("single_language={l}"),
            Toggle::RandomInit => "random_init".into(),
            Toggle::IncludeSource { provenance, include } => format!("include_source={provenance}:{include}"),
            Toggle::FreezeScope(s) => match s {
                FreezeScope::None => "freeze=none".into(),
                FreezeScope::DecoderOnly => "freeze=decoder_only".into(),
                FreezeScope::LastKDecoderLayers(k) => format!("freeze=last_{k}_decoder_layers"),
            },
        }
    }
}

/// The run every ablation variant is derived from.
#[derive(Clone, Debug)]
pub struct AblationBase {
    pub config: TrainConfig,
    pub shape: TransformerShape,
    pub init: Init,
    pub data: TrainData,
}

fn variant_id(toggles: &[Toggle]) -> String {
    if toggles.is_empty() {
        return "base".into();
    }
    toggles
        .iter()
        .map(Toggle::label)
        .collect::<Vec<_>>()
        .join("+")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=+._-".contains(c) { c } else { '_' })
        .collect()
}

/// The run spec and data obtained by applying `toggles` to `base`.
pub fn apply_toggles(base: &AblationBase, toggles: &[Toggle]) -> Result<(RunSpec, TrainData)> {
    let mut config = base.config.clone();
    let mut init = base.init.clone();
    let mut data = base.data.clone();
    for t in toggles {
        match t {
            Toggle::SingleLanguage(l) => {
                data.corpora.retain(|p, _| &p.target == l);
                data.dev.retain(|k, _| k == l);
            }
            Toggle::RandomInit => init = Init::Random { seed: config.seed },
            Toggle::IncludeSource { provenance, include } => {
                if !include {
                    for c in data.corpora.values_mut() {
                        c.retain_provenance(|p| p != provenance);
                    }
                    data.corpora.retain(|_, c| !c.is_empty());
                }
            }
            Toggle::FreezeScope(s) => config.freeze_scope = *s,
        }
    }
    data.validate()?;
    let spec = RunSpec {
        run_id: variant_id(toggles),
        config,
        shape: base.shape,
        init,
    };
    Ok((spec, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    #[serde(serialize_with = "chrf1")]
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run_id: String,
    pub toggles: Vec<String>,
    /// Per-language dev chrF at the table's `updates`.
    #[serde(serialize_with = "chrf1_map")]
    pub scores: BTreeMap<LanguageCode, f64>,
    #[serde(serialize_with = "chrf1")]
    pub mean: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// The update count every row is reported at.
    pub updates: u64,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
    pub table: ComparisonTable,
}

/// Builds the comparison at the latest validation step shared by all runs.
pub fn compare_runs(runs: &[RunRecord], toggles: &[Vec<Toggle>]) -> Result<ComparisonTable> {
    let mut shared: Option<BTreeSet<u64>> = None;
    for r in runs {
        let steps: BTreeSet<u64> = r.snapshots.iter().map(|s| s.step).collect();
        shared = Some(match shared {
            None => steps,
            Some(acc) => acc.intersection(&steps).copied().collect(),
        });
    }
    let updates = shared
        .and_then(|s| s.last().copied())
        .ok_or_else(|| PipelineError::Invalid("runs share no validation step".into()))?;
    let rows = runs
        .iter()
        .zip(toggles)
        .map(|(r, t)| {
            let snap = r.snapshots.iter().find(|s| s.step == updates).expect("shared step");
            ComparisonRow {
                run_id: r.run_id.clone(),
                toggles: t.iter().map(Toggle::label).collect(),
                scores: snap.scores.clone(),
                mean: snap.mean,
                curve: r
                    .snapshots
                    .iter()
                    .map(|s| CurvePoint {
                        step: s.step,
                        mean: s.mean,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(ComparisonTable { updates, rows })
}

/// Trains one run per toggle combination under `dir/<variant>` and compares
/// them at matched update counts. The comparison is written to
/// `dir/comparison.json`.
pub fn ablation_run(dir: &Path, base: &AblationBase, variants: &[Vec<Toggle>]) -> Result<AblationReport> {
    let mut runs = Vec::new();
    let mut seen = BTreeSet::new();
    for toggles in variants {
        let (spec, data) = apply_toggles(base, toggles)?;
        if !seen.insert(spec.run_id.clone()) {
            return Err(PipelineError::Invalid(format!("variant {} listed twice", spec.run_id)));
        }
        runs.push(train_run(&dir.join(&spec.run_id), &spec, &data)?);
    }
    let table = compare_runs(&runs, variants)?;
    write_report(&dir.join("comparison.json"), &table)?;
    Ok(AblationReport { runs, table })
}

/// First validated step at which `lang` reaches `threshold` chrF.
pub fn updates_to_reach(run: &RunRecord, lang: &LanguageCode, threshold: f64) -> Option<u64> {
    run.snapshots
        .iter()
        .find(|s| s.scores.get(lang).is_some_and(|&x| x >= threshold))
        .map(|s| s.step)
}
