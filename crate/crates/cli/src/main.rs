//! `lrmt`: command-line entry point for every pipeline stage.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Reports are
//! printed to stdout as canonical JSON.

mod job;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lrmt_core::codec::{build_vocab, Vocabulary};
use lrmt_core::corpus::{
    self, audit, czn_normalize, detokenize, load_parallel, map_unsupported_punct, read_char_tsv, read_lines,
    write_lines, Corpus, LanguageCode, LanguagePair, Manifest, Provenance, ReplacementReport, SentencePair,
};
use lrmt_core::decode::{translate_corpus, Ensemble, EnsembleSpec};
use lrmt_core::metrics::{corpus_chrf, ChrfParams};
use lrmt_core::model::Checkpoint;
use lrmt_core::pipeline::{
    ablation_run, backtranslate_expand, ensemble_dev_scores, pick_ensembles, select_best_mean,
    select_best_mean_across, select_best_per_language, train_run_until, zero_shot_eval, DevSet, RunRecord,
};
use lrmt_core::report::{emit_report, write_report};
use serde::Serialize;

use job::{czn_table, read_corpus, read_json, AblationJob, TrainJob};

#[derive(Parser, Debug)]
#[command(name = "lrmt", version, about = "Multilingual low-resource MT toolkit")]
struct Cli {
    /// Job or settings file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed. Decoding and scoring are deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training, decoding and scoring.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra language codes to register, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    languages: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load line-aligned source/target files into a corpus.
    Ingest(IngestArgs),
    /// Detokenize, map unsupported punctuation and normalize czn tones.
    Normalize(NormalizeArgs),
    /// Report duplicates and cross-corpus overlap.
    Audit(CorporaArgs),
    /// Concatenate corpora of one pair.
    Merge(MergeArgs),
    /// Build a character vocabulary with language tags.
    Vocab(VocabArgs),
    /// Train a run described by --config.
    Train(TrainArgs),
    /// Translate a file with a checkpoint or ensemble.
    Translate(TranslateArgs),
    /// Corpus chrF of a hypothesis file.
    Score(ScoreArgs),
    /// Expand a corpus with backtranslated monolingual data.
    Backtranslate(BacktranslateArgs),
    /// Choose checkpoints or ensembles by dev chrF.
    Select(SelectArgs),
    /// Score translation directions on multiparallel dev data.
    Zeroshot(ZeroshotArgs),
    /// Train and compare ablation variants described by --config.
    Ablate,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Language pair, e.g. es-gn.
    #[arg(long)]
    pair: String,
    #[arg(long, default_value = "anlp23")]
    provenance: String,
}

#[derive(Args, Debug)]
struct NormalizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    detokenize: bool,
    /// Two-column TSV used for characters missing from --vocab.
    #[arg(long, requires = "vocab")]
    punct_map: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Normalize czn superscripts with the default table.
    #[arg(long)]
    czn: bool,
    /// Normalize czn superscripts with a TSV table.
    #[arg(long, conflicts_with = "czn")]
    czn_table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorporaArgs {
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long)]
    dedup: bool,
}

#[derive(Args, Debug)]
struct VocabArgs {
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Extra language tags, comma-separated.
    #[arg(long, value_delimiter = ',')]
    tags: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Stop after this many updates (the run can be resumed).
    #[arg(long)]
    halt_after: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint to decode with.
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    model: Option<PathBuf>,
    /// Ensemble spec JSON.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target: String,
    /// Restore czn tones with the default table (`default`) or a TSV.
    #[arg(long)]
    czn_table: Option<String>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args, Debug)]
struct BacktranslateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Monolingual text in the base corpus's target language.
    #[arg(long)]
    mono: PathBuf,
    /// Corpus to expand.
    #[arg(long)]
    base: PathBuf,
    /// Identifies the reverse model in the report.
    #[arg(long)]
    reverse_id: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    BestMean,
    PerLanguage,
    Ensemble,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Run directories.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Candidate ensemble specs (ensemble strategy).
    #[arg(long = "candidate")]
    candidates: Vec<PathBuf>,
    /// Dev corpora for evaluating candidates.
    #[arg(long = "dev")]
    dev: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ZeroshotArgs {
    #[arg(long)]
    model: PathBuf,
    /// Row-aligned dev column, `lang=path`.
    #[arg(long = "column", required = true)]
    columns: Vec<String>,
    /// Direction `src-tgt`.
    #[arg(long = "direction", required = true)]
    directions: Vec<String>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    for code in &cli.languages {
        lang(code)?;
    }
    let out = cli.out.clone();
    match &cli.command {
        Command::Ingest(a) => ingest(a, out.as_deref()),
        Command::Normalize(a) => normalize(a, out.as_deref()),
        Command::Audit(a) => {
            let corpora = read_corpora(&a.corpora)?;
            emit(&audit(&corpora), out.as_deref(), "audit.json")
        }
        Command::Merge(a) => merge(a, out.as_deref()),
        Command::Vocab(a) => vocab(a, out.as_deref()),
        Command::Train(a) => train(&cli, a),
        Command::Translate(a) => translate(&cli, a),
        Command::Score(a) => score(a, out.as_deref()),
        Command::Backtranslate(a) => backtranslate(&cli, a),
        Command::Select(a) => select(a, out.as_deref()),
        Command::Zeroshot(a) => zeroshot(a, out.as_deref()),
        Command::Ablate => ablate(&cli),
    }
}

/// Prints `report` and, with an output directory, also writes it there.
fn emit<T: Serialize + ?Sized>(report: &T, out: Option<&Path>, name: &str) -> Result<()> {
    print!("{}", emit_report(report)?);
    if let Some(dir) = out {
        write_report(&dir.join(name), report)?;
    }
    Ok(())
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| anyhow!("--out DIR is required for this subcommand"))
}

fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    write_report(&dir.join("corpus.json"), corpus)?;
    Ok(())
}

fn read_corpora(paths: &[PathBuf]) -> Result<Vec<Corpus>> {
    paths.iter().map(|p| read_corpus(p)).collect()
}

fn lang(code: &str) -> Result<LanguageCode> {
    Ok(corpus::register_language(code)?)
}

fn ingest(a: &IngestArgs, out: Option<&Path>) -> Result<()> {
    let dir = require_out(out)?;
    let pair = LanguagePair::parse(&a.pair)?;
    let provenance: Provenance = a.provenance.parse()?;
    let c = load_parallel(&a.src, &a.tgt, pair, provenance)?;
    write_corpus(dir, &c)?;
    emit(&Manifest::from_corpora([&c]), Some(dir), "manifest.json")
}

#[derive(Serialize)]
struct NormalizeReport {
    input: usize,
    output: usize,
    replacements: ReplacementReport,
}

fn normalize(a: &NormalizeArgs, out: Option<&Path>) -> Result<()> {
    let dir = require_out(out)?;
    let c = read_corpus(&a.corpus)?;
    let mapping: Option<(Vocabulary, BTreeMap<char, char>)> = match &a.punct_map {
        Some(p) => Some((
            Vocabulary::load(a.vocab.as_ref().expect("clap enforces --vocab"))?,
            read_char_tsv(p)?.into_iter().collect(),
        )),
        None => None,
    };
    let table = match (&a.czn_table, a.czn) {
        (Some(p), _) => Some(corpus::CharTable::from_tsv(p)?),
        (None, true) => Some(corpus::CharTable::czn_default()),
        (None, false) => None,
    };
    let target_is_czn = c.pair().target.as_str() == "czn";
    let mut report = ReplacementReport::default();
    let mut clean = |text: &str, czn: bool| {
        let mut t = if a.detokenize { detokenize(text) } else { text.to_string() };
        if let Some((vocab, map)) = &mapping {
            let (mapped, r) = map_unsupported_punct(&t, vocab, map);
            report.absorb(&r);
            t = mapped;
        }
        match (&table, czn) {
            (Some(table), true) => czn_normalize(&t, table),
            _ => t,
        }
    };
    let mut normalized = Corpus::new(c.pair().clone());
    for p in c.pairs() {
        let (src, tgt) = (clean(&p.source, false), clean(&p.target, target_is_czn));
        // segments emptied by normalization are dropped
        if let Ok(sp) = SentencePair::new(src, tgt, p.pair.clone(), p.provenance.clone()) {
            normalized.push(sp)?;
        }
    }
    write_corpus(dir, &normalized)?;
    emit(
        &NormalizeReport {
            input: c.len(),
            output: normalized.len(),
            replacements: report,
        },
        Some(dir),
        "normalize.json",
    )
}

fn merge(a: &MergeArgs, out: Option<&Path>) -> Result<()> {
    let dir = require_out(out)?;
    let (merged, manifest) = corpus::merge(&read_corpora(&a.corpora)?, a.dedup)?;
    write_corpus(dir, &merged)?;
    emit(&manifest, Some(dir), "manifest.json")
}

#[derive(Serialize)]
struct VocabReport {
    size: usize,
    fingerprint: String,
    languages: Vec<LanguageCode>,
}

fn vocab(a: &VocabArgs, out: Option<&Path>) -> Result<()> {
    let dir = require_out(out)?;
    let corpora = read_corpora(&a.corpora)?;
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let tags = a.tags.iter().map(|t| lang(t)).collect::<Result<Vec<_>>>()?;
    let v = build_vocab(&refs, a.min_count)?.extend_with_tags(&tags);
    std::fs::create_dir_all(dir)?;
    v.save(&dir.join("vocab.json"))?;
    emit(
        &VocabReport {
            size: v.len(),
            fingerprint: v.fingerprint_hex(),
            languages: v.languages(),
        },
        None,
        "",
    )
}

fn job_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| anyhow!("train needs --config JOB.json"))?;
    let dir = require_out(cli.out.as_deref())?;
    let job: TrainJob = read_json(path)?;
    let base = job_base(path);
    let spec = job.run_spec(&base, cli.seed)?;
    let data = job.data(&base)?;
    let record = train_run_until(dir, &spec, &data, a.halt_after)?;
    emit(&record, None, "")
}

/// Decoding settings from --config when it holds a job file.
fn config_beam(cli: &Cli) -> Result<Option<usize>> {
    match &cli.config {
        None => Ok(None),
        Some(p) => {
            let job: TrainJob = read_json(p)?;
            Ok(Some(job.train_config(cli.seed)?.beam_size))
        }
    }
}

fn load_spec(cli: &Cli, m: &ModelArgs) -> Result<EnsembleSpec> {
    let mut spec = match (&m.model, &m.ensemble) {
        (Some(p), _) => EnsembleSpec::new(vec![p.clone()]),
        (None, Some(p)) => EnsembleSpec::read(p)?,
        (None, None) => bail!("--model or --ensemble is required"),
    };
    if let Some(b) = m.beam.or(config_beam(cli)?) {
        spec.beam_size = b;
    }
    if let Some(l) = m.max_len {
        spec.max_len = l;
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
struct TranslateReport {
    segments: usize,
    errors: Vec<lrmt_core::decode::SegmentError>,
    output: PathBuf,
}

fn translate(cli: &Cli, a: &TranslateArgs) -> Result<()> {
    let dir = require_out(cli.out.as_deref())?;
    let spec = load_spec(cli, &a.model)?;
    let members = spec.load()?;
    let vocab = members[0].vocab.clone();
    let ensemble = Ensemble::new(members.iter().collect(), spec.combination)?;
    let sources = read_lines(&a.input)?;
    let target = lang(&a.target)?;
    let table = czn_table(a.czn_table.as_deref(), Path::new(""))?;
    let out = translate_corpus(&ensemble, &vocab, &sources, &target, spec.beam_size, spec.max_len, table.as_ref());
    std::fs::create_dir_all(dir)?;
    let hyp = dir.join("hyp.txt");
    write_lines(&hyp, out.hypotheses.iter().map(String::as_str))?;
    emit(
        &TranslateReport {
            segments: out.hypotheses.len(),
            errors: out.errors,
            output: hyp,
        },
        None,
        "",
    )
}

fn score(a: &ScoreArgs, out: Option<&Path>) -> Result<()> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let report = corpus_chrf(&hyps, &refs, &ChrfParams::default())?;
    emit(&report, out, "score.json")
}

#[derive(Serialize)]
struct BacktranslateReport {
    manifest: Manifest,
    synthetic: usize,
    reverse_id: String,
    errors: Vec<lrmt_core::decode::SegmentError>,
}

fn backtranslate(cli: &Cli, a: &BacktranslateArgs) -> Result<()> {
    let dir = require_out(cli.out.as_deref())?;
    let spec = load_spec(cli, &a.model)?;
    let mono = corpus::load_monolingual(&a.mono)?;
    let base = read_corpus(&a.base)?;
    let bt = backtranslate_expand(&mono, &spec, &base, &a.reverse_id)?;
    write_corpus(dir, &bt.corpus)?;
    write_report(&dir.join("manifest.json"), &bt.manifest)?;
    emit(
        &BacktranslateReport {
            manifest: bt.manifest,
            synthetic: bt.synthetic,
            reverse_id: bt.reverse_id,
            errors: bt.errors,
        },
        Some(dir),
        "backtranslate.json",
    )
}

fn select(a: &SelectArgs, out: Option<&Path>) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|d| RunRecord::load(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = match a.strategy {
        StrategyArg::BestMean if runs.len() == 1 => select_best_mean(&runs[0])?,
        StrategyArg::BestMean => select_best_mean_across(&runs)?,
        StrategyArg::PerLanguage => select_best_per_language(&runs)?,
        StrategyArg::Ensemble => {
            if a.dev.is_empty() {
                bail!("--strategy ensemble needs --dev corpora");
            }
            let dev: BTreeMap<LanguageCode, DevSet> = read_corpora(&a.dev)?
                .iter()
                .map(|c| Ok((c.pair().target.clone(), DevSet::from_corpus(c)?)))
                .collect::<Result<_>>()?;
            let candidates = a
                .candidates
                .iter()
                .map(|p| Ok(EnsembleSpec::read(p)?))
                .collect::<Result<Vec<_>>>()?;
            let baseline = select_best_per_language(&runs)?;
            pick_ensembles(&candidates, &baseline, |s| ensemble_dev_scores(s, &dev, None))?
        }
    };
    emit(&report, out, "selection.json")
}

fn zeroshot(a: &ZeroshotArgs, out: Option<&Path>) -> Result<()> {
    let model = Checkpoint::load(&a.model)?;
    let mut columns = BTreeMap::new();
    for c in &a.columns {
        let (l, p) = c
            .split_once('=')
            .ok_or_else(|| anyhow!("--column expects lang=path, got {c:?}"))?;
        columns.insert(lang(l)?, read_lines(Path::new(p))?);
    }
    let directions = a
        .directions
        .iter()
        .map(|d| {
            let p = LanguagePair::parse(d)?;
            Ok((p.source, p.target))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = zero_shot_eval(&model, &model.vocab, &columns, &directions, a.beam, None)?;
    emit(&report, out, "zeroshot.json")
}

fn ablate(cli: &Cli) -> Result<()> {
    let path = cli.config.as_deref().ok_or_else(|| anyhow!("ablate needs --config JOB.json"))?;
    let dir = require_out(cli.out.as_deref())?;
    let job: AblationJob = read_json(path)?;
    let base = job.base.ablation_base(&job_base(path), cli.seed)?;
    let report = ablation_run(dir, &base, &job.variants)?;
    emit(&report.table, None, "")
}
