//! Command-line front end. [`run`] parses arguments, applies the optional
//! TOML config overlay and dispatches to one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::analysis::{self, RatingMatrix, Scale, ScanMode, SensitiveLexicon};
use crate::dialog::{Dialog, MASK};
use crate::encoder::{
    EncoderConfig, EncoderParams, RerankTriplet, RerankerParams, TrainConfig, TrainingPair, Vocab,
    train_dual_encoder, train_reranker, SEPARATOR_TOKEN,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::index::Index;
use crate::inpainter::{
    self, GeneratorBackend, InpaintConfig, OracleBackend, RemoteBackend, StubBackend,
};
use crate::jsonl;
use crate::metrics::{self, EvalConfig, Gain, Qrels, RunRanking};
use crate::mining::{self, MineConfig, MinedNegatives, MultistageConfig};
use crate::model_io;
use crate::passage::{self, Passage, PassageRecord, RuleSplitter};
use crate::recon;
use crate::retrieval_data::{self, RetrievalRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "inpaint", version, about = "Dialog inpainting and conversational retrieval toolkit")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// TOML file with default flag values; command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Stub,
    Oracle,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GainArg {
    Exp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Nominal,
    Ordinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    CoOccurrence,
    NotInPassage,
}

#[derive(Debug, clap::Args)]
pub struct EncoderArgs {
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = crate::encoder::DEFAULT_OUTPUT_DIM)]
    pub output_dim: usize,
    #[arg(long, default_value_t = crate::encoder::DEFAULT_HASH_BUCKETS)]
    pub hash_buckets: usize,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = crate::encoder::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long = "lr", default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            temperature: self.temperature,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn passages into dialogs by filling every reader turn.
    Inpaint {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "stub")]
        backend: BackendArg,
        /// Stub question template; `{title}` and `{step}` are substituted.
        #[arg(long, default_value = "What about {title}?")]
        stub_template: String,
        /// Completed dialogs replayed by the oracle backend.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, env = "INPAINT_LM_ENDPOINT")]
        endpoint: Option<String>,
        /// Per-request timeout in seconds.
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
        #[arg(long, default_value_t = passage::DEFAULT_MAX_SENTENCES)]
        max_sentences: usize,
        #[arg(long, default_value = passage::DEFAULT_PROMPT_TEMPLATE)]
        prompt_template: String,
        #[arg(long, default_value_t = inpainter::DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
        /// One abbreviation per line, replacing the built-in list.
        #[arg(long)]
        abbreviations: Option<PathBuf>,
        /// Where rejected passages go (default: `<out>.rejects.jsonl`).
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Single-mask reconstruction examples for inpainter training.
    MakeRecon {
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_dialog: usize,
    },
    /// Retrieval examples (one per dialog prefix) and optional qrels.
    MakeRetrieval {
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include earlier answers in the query.
        #[arg(long)]
        include_answers: bool,
        #[arg(long)]
        qrels: Option<PathBuf>,
    },
    /// Train the dual encoder with in-batch (and optionally mined) negatives.
    TrainDe {
        #[arg(long)]
        examples: PathBuf,
        /// Passage corpus; added to the vocabulary and needed for negatives.
        #[arg(long)]
        passages: Option<PathBuf>,
        #[arg(long)]
        negatives: Option<PathBuf>,
        /// Warm start from these parameters.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Encode a passage corpus into an exact-search index.
    Index {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k retrieval for retrieval-example queries; writes a run file.
    Retrieve {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(short, long, default_value_t = mining::DEFAULT_DEPTH)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dense")]
        tag: String,
    },
    /// Sample hard negatives from a run, skipping judged positives.
    Mine {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(short, long, default_value_t = mining::DEFAULT_NEGATIVES)]
        n: usize,
        #[arg(short, long, default_value_t = mining::DEFAULT_DEPTH)]
        k: usize,
        #[arg(long)]
        allow_false_negatives: bool,
        #[arg(long, default_value_t = 2)]
        stage: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reranker on mined negatives.
    TrainRr {
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        negatives: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long = "lr", default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
    },
    /// Rescore the head of a run with the reranker.
    Rerank {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value_t = mining::DEFAULT_DEPTH)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rerank")]
        tag: String,
    },
    /// Score a run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value = "mrr,mrr@5,r@10,ndcg@3")]
        metrics: String,
        /// `cast19` (grade >= 1 relevant) or `cast20` (grade >= 2).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        min_grade: Option<u32>,
        #[arg(long, value_enum)]
        gain: Option<GainArg>,
        /// CSV report (`metric,query,value`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Split dialogs into k folds by dialog id.
    Folds {
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Question-type counts per question turn.
    AnalyzeQuestions {
        #[arg(long)]
        dialogs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Krippendorff's alpha of an items × raters CSV.
    Alpha {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value = "nominal")]
        scale: ScaleArg,
    },
    /// Flag questions pairing identity terms with sensitive adjectives.
    ScanSensitive {
        #[arg(long)]
        dialogs: PathBuf,
        /// Lexicon JSON (default: the bundled example lexicon).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        passages: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "co-occurrence")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy end-to-end run: inpaint, build examples, three training stages.
    Pipeline {
        #[arg(long)]
        out_dir: PathBuf,
        /// Passage corpus (default: a synthetic disjoint-vocabulary corpus).
        #[arg(long)]
        passages: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        toy_passages: usize,
        #[arg(long, default_value_t = 3)]
        stages: u32,
        #[arg(long)]
        include_answers: bool,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        #[arg(long, default_value_t = 16)]
        output_dim: usize,
        #[arg(long, default_value_t = crate::encoder::DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long = "lr", default_value_t = 1e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        reranker_lr: f64,
        #[arg(long, default_value_t = 10)]
        reranker_epochs: usize,
        #[arg(short, long, default_value_t = mining::DEFAULT_NEGATIVES)]
        n: usize,
        #[arg(short, long, default_value_t = mining::DEFAULT_DEPTH)]
        k: usize,
    },
}

/// Flags of the global options that take a value.
const GLOBAL_VALUE_FLAGS: &[&str] = &["--seed", "--workers", "--config"];

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn toml_flags(table: &toml::Table, section: &str) -> std::result::Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => out.extend([flag.into(), s.into()]),
            toml::Value::Integer(i) => out.extend([flag.into(), i.to_string().into()]),
            toml::Value::Float(f) => out.extend([flag.into(), f.to_string().into()]),
            toml::Value::Table(_) => {}
            other => return Err(format!("[{section}] {key}: unsupported value {other}")),
        }
    }
    Ok(out)
}

/// Splices config-file flags in front of the user's own: top-level keys go
/// before the subcommand, `[subcommand]` tables right after it.
fn overlay(args: Vec<OsString>, path: &Path) -> std::result::Result<Vec<OsString>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
    let mut sub_at = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&a.as_ref()) {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            sub_at = Some(i);
            break;
        }
        i += 1;
    }
    let mut out = vec![args[0].clone()];
    out.extend(toml_flags(&table, "top level")?.into_iter().filter(|f| f != "--config"));
    let Some(at) = sub_at else {
        out.extend(args[1..].iter().cloned());
        return Ok(out);
    };
    let sub = args[at].to_string_lossy().to_string();
    out.extend(args[1..=at].iter().cloned());
    if let Some(toml::Value::Table(t)) = table.get(&sub) {
        out.extend(toml_flags(t, &sub)?);
    }
    out.extend(args[at + 1..].iter().cloned());
    Ok(out)
}

fn command() -> clap::Command {
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    cmd
}

/// Parses `args` (including the program name) without touching the
/// process; usage errors come back as rendered text.
pub fn parse(args: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.is_empty() {
        args.push("inpaint".into());
    }
    if let Some(path) = config_path(&args) {
        match overlay(args, &path) {
            Ok(a) => args = a,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        }
    }
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    info!("resolved config: {cli:?}");

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_backend() { EXIT_BACKEND } else { EXIT_DATA }
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CmdResult = std::result::Result<i32, Failure>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::at(path))?))
}

fn write_text(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_text(path, |w| jsonl::write_to(w, records))
}

fn load_passages(path: &Path) -> Result<Vec<PassageRecord>> {
    jsonl::read(path)
}

fn load_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    jsonl::read(path)
}

fn load_run(path: &Path) -> Result<RunRanking> {
    RunRanking::parse(&fs::read_to_string(path).map_err(Error::at(path))?)
}

fn load_qrels(path: &Path) -> Result<Qrels> {
    Qrels::parse(&fs::read_to_string(path).map_err(Error::at(path))?)
}

fn workers() -> usize {
    rayon::current_num_threads()
}

fn segment(records: &[PassageRecord], splitter: &RuleSplitter, max_sentences: usize) -> (Vec<Passage>, Vec<inpainter::Reject>) {
    let mut passages = Vec::new();
    let mut rejects = Vec::new();
    for r in records {
        match Passage::from_record(r, splitter, max_sentences, MASK) {
            Ok(p) => passages.push(p),
            Err(e) => {
                warn!("rejecting passage {}: {e}", r.id);
                rejects.push(inpainter::Reject {
                    passage_id: r.id.clone(),
                    step: 0,
                    error: e.to_string(),
                    backend: false,
                });
            }
        }
    }
    (passages, rejects)
}

fn training_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, buckets: usize) -> Result<Vocab> {
    Vocab::from_texts(texts, buckets)
}

fn dispatch(cli: &Cli) -> CmdResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Inpaint {
            passages,
            out,
            backend,
            stub_template,
            oracle,
            endpoint,
            timeout,
            max_sentences,
            prompt_template,
            max_new_tokens,
            abbreviations,
            rejects,
        } => {
            let backend: Box<dyn GeneratorBackend> = match backend {
                BackendArg::Stub => Box::new(StubBackend::new(stub_template.clone())),
                BackendArg::Oracle => {
                    let path = oracle
                        .as_ref()
                        .ok_or_else(|| Failure::Usage("--backend oracle needs --oracle".into()))?;
                    Box::new(OracleBackend::from_dialogs(&load_dialogs(path)?))
                }
                BackendArg::Http => {
                    let endpoint = endpoint.as_ref().ok_or_else(|| {
                        Failure::Usage("--backend http needs --endpoint or INPAINT_LM_ENDPOINT".into())
                    })?;
                    if !(*timeout > 0.0 && timeout.is_finite()) {
                        return Err(Failure::Usage("--timeout must be positive".into()));
                    }
                    Box::new(RemoteBackend::new(endpoint, Duration::from_secs_f64(*timeout)))
                }
            };
            let splitter = match abbreviations {
                Some(p) => RuleSplitter::from_list(&fs::read_to_string(p).map_err(Error::at(p))?),
                None => RuleSplitter::default(),
            };
            let records = load_passages(passages)?;
            let (segmented, mut rejected) = segment(&records, &splitter, *max_sentences);
            let config = InpaintConfig {
                mask: MASK.into(),
                prompt_template: prompt_template.clone(),
                max_new_tokens: *max_new_tokens,
            };
            let result = inpainter::inpaint_corpus(&segmented, backend.as_ref(), &config, workers())?;
            write_jsonl(out, &result.dialogs)?;
            rejected.extend(result.rejects);
            info!("{} dialogs written, {} passages rejected", result.dialogs.len(), rejected.len());
            if !rejected.is_empty() {
                let path = rejects.clone().unwrap_or_else(|| {
                    let mut p = out.clone().into_os_string();
                    p.push(".rejects.jsonl");
                    p.into()
                });
                write_jsonl(&path, &rejected)?;
            }
            if rejected.iter().any(|r| r.backend) {
                eprintln!("error: generator backend failed; see rejects file");
                return Ok(EXIT_BACKEND);
            }
            Ok(EXIT_OK)
        }
        Command::MakeRecon { dialogs, out, per_dialog } => {
            let dialogs = load_dialogs(dialogs)?;
            let examples = recon::make_corpus(&dialogs, seed, *per_dialog, MASK)?;
            write_jsonl(out, &examples)?;
            info!("{} reconstruction examples", examples.len());
            Ok(EXIT_OK)
        }
        Command::MakeRetrieval {
            dialogs,
            out,
            include_answers,
            qrels,
        } => {
            let dialogs = load_dialogs(dialogs)?;
            let records = retrieval_data::records_for_dialogs(&dialogs, *include_answers)?;
            write_jsonl(out, &records)?;
            if let Some(path) = qrels {
                let q = mining::qrels_for(&records)?;
                write_text(path, |w| q.write(w))?;
            }
            info!("{} retrieval examples", records.len());
            Ok(EXIT_OK)
        }
        Command::TrainDe {
            examples,
            passages,
            negatives,
            init,
            out,
            loss_curve,
            encoder,
            train,
        } => {
            let records: Vec<RetrievalRecord> = jsonl::read(examples)?;
            let corpus = passages.as_deref().map(load_passages).transpose()?.unwrap_or_default();
            let params = match init {
                Some(p) => model_io::load_encoder(p)?,
                None => {
                    let texts = records
                        .iter()
                        .flat_map(|r| [r.query.as_str(), r.positive.as_str()])
                        .chain(corpus.iter().map(|p| p.text.as_str()));
                    let vocab = training_vocab(texts, encoder.hash_buckets)?;
                    EncoderParams::init(
                        vocab,
                        &EncoderConfig {
                            embed_dim: encoder.embed_dim,
                            output_dim: encoder.output_dim,
                            hash_buckets: encoder.hash_buckets,
                            seed,
                        },
                    )?
                }
            };
            let mined = negatives
                .as_deref()
                .map(|p| MinedNegatives::from_records(jsonl::read(p)?))
                .transpose()?;
            if mined.is_some() && corpus.is_empty() {
                return Err(Failure::Usage("--negatives needs --passages for passage text".into()));
            }
            let text: HashMap<&str, &str> = corpus.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
            let pairs = records
                .iter()
                .map(|r| {
                    let mut pair = TrainingPair::new(r.query.clone(), r.positive.clone(), r.passage_id.clone());
                    if let Some(m) = &mined {
                        for id in m.get(&r.query_id()) {
                            let t = text
                                .get(id.as_str())
                                .ok_or_else(|| Error::Config(format!("negative {id} is not in the passage corpus")))?;
                            pair.negatives.push((id.clone(), t.to_string()));
                        }
                    }
                    Ok(pair)
                })
                .collect::<Result<Vec<_>>>()?;
            let trained = train_dual_encoder(params, &pairs, &train.config(seed))?;
            model_io::save_encoder(out, &trained.params)?;
            if let Some(path) = loss_curve {
                write_text(path, |w| model_io::write_loss_curve(w, &trained.loss_curve))?;
            }
            info!("final loss {:?}", trained.loss_curve.last());
            Ok(EXIT_OK)
        }
        Command::Index { params, passages, out } => {
            let params = model_io::load_encoder(params)?;
            let (index, excluded) = Index::build(&params, &load_passages(passages)?)?;
            if !excluded.is_empty() {
                warn!("{} passages excluded: {}", excluded.len(), excluded.join(", "));
            }
            index.save(out)?;
            info!("indexed {} passages", index.len());
            Ok(EXIT_OK)
        }
        Command::Retrieve {
            params,
            index,
            queries,
            k,
            out,
            tag,
        } => {
            let params = model_io::load_encoder(params)?;
            let index = Index::load(index)?;
            if index.fingerprint() != &model_io::fingerprint(&params) {
                return Err(Error::Config("index was built with different encoder parameters".into()).into());
            }
            let records: Vec<RetrievalRecord> = jsonl::read(queries)?;
            let queries: Vec<(String, String)> = records.iter().map(|r| (r.query_id(), r.query.clone())).collect();
            let run = mining::retrieve(&params, &index, &queries, *k)?;
            write_text(out, |w| run.write(w, tag))?;
            Ok(EXIT_OK)
        }
        Command::Mine {
            run,
            qrels,
            n,
            k,
            allow_false_negatives,
            stage,
            out,
        } => {
            let config = MineConfig {
                n: *n,
                k: *k,
                seed,
                allow_false_negatives: *allow_false_negatives,
            };
            let mut mined = mining::mine_hard_negatives(&load_run(run)?, &load_qrels(qrels)?, &config);
            mined.stage = *stage;
            write_jsonl(out, &mined.records())?;
            if !mined.missing.is_empty() {
                warn!("{} judged queries missing from the run", mined.missing.len());
            }
            Ok(EXIT_OK)
        }
        Command::TrainRr {
            examples,
            negatives,
            passages,
            out,
            loss_curve,
            encoder,
            batch_size,
            learning_rate,
            epochs,
        } => {
            let records: Vec<RetrievalRecord> = jsonl::read(examples)?;
            let corpus = load_passages(passages)?;
            let mined = MinedNegatives::from_records(jsonl::read(negatives)?)?;
            let text: HashMap<&str, &str> = corpus.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect();
            let mut triplets = Vec::new();
            for r in &records {
                let negs = mined
                    .get(&r.query_id())
                    .iter()
                    .map(|id| {
                        text.get(id.as_str())
                            .map(|t| t.to_string())
                            .ok_or_else(|| Error::Config(format!("negative {id} is not in the passage corpus")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if negs.is_empty() {
                    continue;
                }
                triplets.push(RerankTriplet {
                    query: r.query.clone(),
                    positive: r.positive.clone(),
                    negatives: negs,
                });
            }
            let mut tokens = training_vocab(
                records
                    .iter()
                    .flat_map(|r| [r.query.as_str(), r.positive.as_str()])
                    .chain(corpus.iter().map(|p| p.text.as_str())),
                encoder.hash_buckets,
            )?
            .tokens()
            .to_vec();
            tokens.push(SEPARATOR_TOKEN.into());
            let params = RerankerParams::init(
                Vocab::new(tokens, encoder.hash_buckets)?,
                &EncoderConfig {
                    embed_dim: encoder.embed_dim,
                    output_dim: encoder.output_dim,
                    hash_buckets: encoder.hash_buckets,
                    seed,
                },
            )?;
            let config = TrainConfig {
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                epochs: *epochs,
                seed,
                ..TrainConfig::default()
            };
            let trained = train_reranker(params, &triplets, &config)?;
            model_io::save_reranker(out, &trained.params)?;
            if let Some(path) = loss_curve {
                write_text(path, |w| model_io::write_loss_curve(w, &trained.loss_curve))?;
            }
            Ok(EXIT_OK)
        }
        Command::Rerank {
            params,
            run,
            queries,
            passages,
            depth,
            out,
            tag,
        } => {
            let params = model_io::load_reranker(params)?;
            let records: Vec<RetrievalRecord> = jsonl::read(queries)?;
            let queries: HashMap<String, String> = records.iter().map(|r| (r.query_id(), r.query.clone())).collect();
            let passages: HashMap<String, String> =
                load_passages(passages)?.into_iter().map(|p| (p.id, p.text)).collect();
            let reranked = mining::rerank(&params, &load_run(run)?, &queries, &passages, *depth)?;
            write_text(out, |w| reranked.write(w, tag))?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            run,
            qrels,
            metrics: spec,
            preset,
            min_grade,
            gain,
            out,
            json,
        } => {
            let mut config = match preset {
                Some(name) => EvalConfig::preset(name).map_err(|e| Failure::Usage(e.to_string()))?,
                None => EvalConfig::default(),
            };
            if let Some(g) = min_grade {
                config.min_grade = *g;
            }
            if let Some(g) = gain {
                config.gain = match g {
                    GainArg::Exp => Gain::Exp,
                    GainArg::Linear => Gain::Linear,
                };
            }
            let metrics = metrics::parse_metrics(spec).map_err(|e| Failure::Usage(e.to_string()))?;
            let report = metrics::evaluate_run(&load_run(run)?, &load_qrels(qrels)?, &metrics, config)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for m in &report.metrics {
                writeln!(lock, "{}\t{:.4}", m.metric, m.aggregate)?;
            }
            if let Some(path) = out {
                write_text(path, |w| report.write_csv(w))?;
            }
            if let Some(path) = json {
                write_text(path, |w| {
                    serde_json::to_writer_pretty(&mut *w, &report)?;
                    writeln!(w)?;
                    Ok(())
                })?;
            }
            Ok(EXIT_OK)
        }
        Command::Folds { dialogs, k, out } => {
            let ids: Vec<String> = load_dialogs(dialogs)?.into_iter().map(|d| d.id).collect();
            let folds = mining::make_folds(&ids, *k, seed)?;
            #[derive(serde::Serialize)]
            struct Row<'a> {
                dialog_id: &'a str,
                fold: usize,
            }
            let rows: Vec<Row> = folds
                .iter()
                .enumerate()
                .flat_map(|(f, ids)| ids.iter().map(move |id| Row { dialog_id: id, fold: f }))
                .collect();
            write_jsonl(out, &rows)?;
            Ok(EXIT_OK)
        }
        Command::AnalyzeQuestions { dialogs, out } => {
            let rows = analysis::question_distribution(&load_dialogs(dialogs)?);
            write_text(out, |w| analysis::write_distribution_csv(w, &rows))?;
            Ok(EXIT_OK)
        }
        Command::Alpha { ratings, scale } => {
            let scale = match scale {
                ScaleArg::Nominal => Scale::Nominal,
                ScaleArg::Ordinal => Scale::Ordinal,
            };
            let m = RatingMatrix::parse_csv(&fs::read_to_string(ratings).map_err(Error::at(ratings))?, scale)?;
            println!("{}", analysis::krippendorff_alpha(&m)?);
            Ok(EXIT_OK)
        }
        Command::ScanSensitive {
            dialogs,
            lexicon,
            passages,
            mode,
            out,
        } => {
            let lexicon = match lexicon {
                Some(p) => SensitiveLexicon::load(p)?,
                None => SensitiveLexicon::seeded(),
            };
            let mode = match mode {
                ModeArg::CoOccurrence => ScanMode::CoOccurrence,
                ModeArg::NotInPassage => ScanMode::NotInPassage,
            };
            if mode == ScanMode::NotInPassage && passages.is_none() {
                return Err(Failure::Usage("--mode not-in-passage needs --passages".into()));
            }
            let texts: Option<HashMap<String, String>> = passages
                .as_deref()
                .map(|p| Ok::<_, Error>(load_passages(p)?.into_iter().map(|p| (p.id, p.text)).collect()))
                .transpose()?;
            let report = analysis::scan_sensitive(&load_dialogs(dialogs)?, &lexicon, texts.as_ref(), mode)?;
            write_jsonl(out, &report.flags)?;
            println!(
                "questions flagged {}/{} ({:.4}), dialogs flagged {}/{} ({:.4})",
                report.flags.len(),
                report.questions,
                report.question_rate,
                report.flagged_dialogs.len(),
                report.dialogs,
                report.dialog_rate
            );
            Ok(EXIT_OK)
        }
        Command::Pipeline {
            out_dir,
            passages,
            toy_passages,
            stages,
            include_answers,
            embed_dim,
            output_dim,
            temperature,
            batch_size,
            learning_rate,
            epochs,
            reranker_lr,
            reranker_epochs,
            n,
            k,
        } => {
            fs::create_dir_all(out_dir)?;
            let records = match passages {
                Some(p) => load_passages(p)?,
                None => fixtures::toy_passages(*toy_passages, 6, 3, seed),
            };
            write_jsonl(&out_dir.join("passages.jsonl"), &records)?;
            let (segmented, rejected) = segment(&records, &RuleSplitter::default(), passage::DEFAULT_MAX_SENTENCES);
            let corpus = inpainter::inpaint_corpus(&segmented, &StubBackend::default(), &InpaintConfig::default(), workers())?;
            write_jsonl(&out_dir.join("dialogs.jsonl"), &corpus.dialogs)?;
            if !rejected.is_empty() || !corpus.rejects.is_empty() {
                warn!("{} passages rejected", rejected.len() + corpus.rejects.len());
            }
            let examples = retrieval_data::records_for_dialogs(&corpus.dialogs, *include_answers)?;
            write_jsonl(&out_dir.join("retrieval.jsonl"), &examples)?;
            let held_in: Vec<RetrievalRecord> = examples.iter().filter(|r| r.i == 1).cloned().collect();
            let qrels = mining::qrels_for(&held_in)?;
            write_text(&out_dir.join("qrels.txt"), |w| qrels.write(w))?;

            let train = TrainConfig {
                temperature: *temperature,
                batch_size: *batch_size,
                learning_rate: *learning_rate,
                epochs: *epochs,
                seed,
            };
            let config = MultistageConfig {
                stages: *stages,
                encoder: EncoderConfig {
                    embed_dim: *embed_dim,
                    output_dim: *output_dim,
                    hash_buckets: crate::encoder::DEFAULT_HASH_BUCKETS,
                    seed,
                },
                retriever: train.clone(),
                reranker: TrainConfig {
                    batch_size: 8,
                    learning_rate: *reranker_lr,
                    epochs: *reranker_epochs,
                    ..train
                },
                mining: MineConfig {
                    n: *n,
                    k: *k,
                    seed,
                    allow_false_negatives: false,
                },
            };
            let result = mining::run_multistage(&examples, &records, &held_in, &config)?;
            model_io::save_encoder(&out_dir.join("retriever1.json"), &result.retriever1.params)?;
            if let Some(r) = &result.retriever2 {
                model_io::save_encoder(&out_dir.join("retriever2.json"), &r.params)?;
            }
            if let Some(r) = &result.reranker {
                model_io::save_reranker(&out_dir.join("reranker.json"), &r.params)?;
            }
            let negatives: Vec<_> = result.negatives.iter().flat_map(MinedNegatives::records).collect();
            write_jsonl(&out_dir.join("negatives.jsonl"), &negatives)?;
            write_text(&out_dir.join("stages.csv"), |w| mining::write_stage_reports(w, &result.reports))?;
            for r in &result.reports {
                println!("stage {} {}: mrr {:.4} mrr@5 {:.4} r@10 {:.4}", r.stage, r.model, r.mrr, r.mrr_at_5, r.recall_at_10);
            }
            Ok(EXIT_OK)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn usage_errors_parse_as_errors() {
        assert!(parse(os(&["inpaint", "bogus"])).is_err());
        assert!(parse(os(&["inpaint", "eval", "--run", "r"])).is_err());
        let cli = parse(os(&["inpaint", "--seed", "4", "folds", "--dialogs", "d", "--out", "o", "-k", "2", "-k", "3"])).unwrap();
        assert_eq!(cli.seed, 4);
        assert!(matches!(cli.command, Command::Folds { k: 3, .. }));
    }

    #[test]
    fn config_overlay_loses_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 9\n[folds]\nk = 4\ndialogs = \"from-config\"\n").unwrap();
        let args = os(&["inpaint", "--config", path.to_str().unwrap(), "folds", "--out", "o", "-k", "2"]);
        let cli = parse(overlay(args, &path).unwrap()).unwrap();
        assert_eq!(cli.seed, 9);
        match cli.command {
            Command::Folds { k, dialogs, .. } => {
                assert_eq!(k, 2);
                assert_eq!(dialogs, PathBuf::from("from-config"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
