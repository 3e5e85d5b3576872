//! Command-line entry point.
//!
//! Every subcommand writes into one output directory (`--out`, else
//! `$SARCASM_OUT/<subcommand>`, else `runs/<subcommand>`) and leaves a
//! `manifest.json` plus the fully resolved `config.toml` next to its outputs.
//! Passing that `config.toml` back with `--config` and the same inputs
//! reproduces the run bit for bit.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::corpus::{self, Corpus, Label, Source};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{categorize_errors, compute_metrics};
use crate::par::Execution;
use crate::sequence::Mode;
use crate::tokenizer::{train_vocab, Tokenizer, TokenizerConfig, Vocabulary};
use crate::train::{self, metrics_jsonl, multi_run, TrainConfig};

pub const OUT_ENV: &str = "SARCASM_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;
pub const EXIT_MIXED_MODE: i32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Target,
    Context,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Target => Mode::TargetOriented,
            ModeArg::Context => Mode::ContextAware,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sarcasm", version, about = "Target-oriented and context-aware sarcasm detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Corpus statistics as JSON.
    Stats,
    /// Build a vocabulary file from the given data.
    BuildVocab,
    /// Train one model per seed and aggregate dev metrics.
    Train,
    /// Score a checkpoint on a labeled file.
    Evaluate,
    /// Write `<id>,<LABEL>` predictions for a file.
    Predict,
    /// Compare target-oriented and context-aware predictions against gold.
    Analyze,
    /// Write a synthetic corpus whose labels are decidable only from context.
    SynthData,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Stats => "stats",
            Command::BuildVocab => "build-vocab",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Predict => "predict",
            Command::Analyze => "analyze",
            Command::SynthData => "synth-data",
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Opts {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input JSONL file.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Second JSONL file, concatenated with --data for joint training.
    #[arg(long, global = true)]
    pub data2: Option<PathBuf>,
    /// Explicit dev file instead of a seeded split of the training data.
    #[arg(long, global = true)]
    pub dev: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true)]
    pub max_len_target: Option<usize>,
    #[arg(long, global = true)]
    pub max_len_context: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', global = true)]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Vocabulary file (one token per line).
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Target-oriented predictions file.
    #[arg(long, global = true)]
    pub to_preds: Option<PathBuf>,
    /// Context-aware predictions file.
    #[arg(long, global = true)]
    pub ca_preds: Option<PathBuf>,
    /// Synthetic corpus size.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Synthetic corpus seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dev_fraction: f64,
    pub split_seed: u64,
    pub deduplicate: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dev_fraction: 0.1,
            split_seed: 42,
            deduplicate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n: 2000, seed: 7 }
    }
}

/// Everything a command needs beyond its input files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve(opts: &Opts) -> Result<Self> {
        let mut cfg = match &opts.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        if let Some(m) = opts.mode {
            t.input.mode = m.into();
        }
        if let Some(v) = opts.max_len_target {
            t.input.max_len_target = v;
        }
        if let Some(v) = opts.max_len_context {
            t.input.max_len_context = v;
        }
        if let Some(v) = &opts.seeds {
            t.seeds = v.clone();
        }
        if let Some(v) = opts.lr {
            t.learning_rate = v;
        }
        if let Some(v) = opts.epochs {
            t.epochs = v;
        }
        if let Some(v) = opts.batch_size {
            t.batch_size = v;
        }
        if opts.sequential {
            t.execution = Execution::Sequential;
        }
        if let Some(v) = opts.n {
            cfg.synth.n = v;
        }
        if let Some(v) = opts.seed {
            cfg.synth.seed = v;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct InputDigest {
    role: &'static str,
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seeds: &'a [u64],
    inputs: &'a [InputDigest],
    outputs: &'a [String],
    config: &'a RunConfig,
}

/// Collects input digests and output names for the manifest.
struct Run {
    command: Command,
    out: PathBuf,
    cfg: RunConfig,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

impl Run {
    fn read_input(&mut self, role: &'static str, path: &Path) -> Result<String> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(InputDigest {
            role,
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        String::from_utf8(bytes).map_err(|e| Error::format("input", format!("{}: {e}", path.display())))
    }

    fn load_corpus(&mut self, role: &'static str, path: &Path) -> Result<Corpus> {
        let text = self.read_input(role, path)?;
        corpus::parse_jsonl(&text, Source::infer(path))
    }

    /// `--data`, concatenated with `--data2` when given.
    fn load_data(&mut self, opts: &Opts) -> Result<Corpus> {
        let path = require(&opts.data, "--data")?;
        let first = self.load_corpus("data", path)?;
        match &opts.data2 {
            Some(p2) => {
                let second = self.load_corpus("data2", p2)?;
                first.concat(second)
            }
            None => Ok(first),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let cfg_text = self.cfg.to_toml();
        self.write("config.toml", &cfg_text)?;
        let seeds: &[u64] = match self.command {
            Command::Train => &self.cfg.train.seeds,
            Command::SynthData => std::slice::from_ref(&self.cfg.synth.seed),
            _ => &[],
        };
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.name(),
            seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
            config: &self.cfg,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.out.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::invalid(format!("{flag} is required")))
}

fn output_dir(opts: &Opts, command: Command) -> PathBuf {
    if let Some(out) = &opts.out {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command.name())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Schema { .. }
        | Error::DuplicateId(_)
        | Error::Unlabeled(_)
        | Error::BadLabel(_)
        | Error::Format { .. } => EXIT_SCHEMA,
        Error::MixedModes => EXIT_MIXED_MODE,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print a one-line diagnostic to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let opts = &cli.opts;
    let cfg = RunConfig::resolve(opts)?;
    let out = output_dir(opts, cli.command);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run {
        command: cli.command,
        out,
        cfg,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match cli.command {
        Command::Stats => stats(&mut run, opts)?,
        Command::BuildVocab => build_vocab(&mut run, opts)?,
        Command::Train => train_cmd(&mut run, opts)?,
        Command::Evaluate => evaluate(&mut run, opts)?,
        Command::Predict => predict(&mut run, opts)?,
        Command::Analyze => analyze(&mut run, opts)?,
        Command::SynthData => synth(&mut run)?,
    }
    run.finish()
}

fn stats(run: &mut Run, opts: &Opts) -> Result<()> {
    let data = run.load_data(opts)?;
    let stats = corpus::compute_stats(&data)?;
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
    print!("{text}");
    run.write("stats.json", &text)
}

fn vocab_texts(c: &Corpus) -> Vec<&str> {
    c.records
        .iter()
        .flat_map(|r| r.context.iter().chain(std::iter::once(&r.response)))
        .map(String::as_str)
        .collect()
}

fn build_vocab(run: &mut Run, opts: &Opts) -> Result<()> {
    run.cfg.tokenizer.validate()?;
    let data = run.load_data(opts)?;
    let vocab = train_vocab(&vocab_texts(&data), &run.cfg.tokenizer);
    println!("{} tokens", vocab.len());
    run.write("vocab.txt", &vocab.to_text())
}

fn join(acc: Option<Corpus>, next: Corpus) -> Result<Corpus> {
    match acc {
        Some(a) => a.concat(next),
        None => Ok(next),
    }
}

fn train_cmd(run: &mut Run, opts: &Opts) -> Result<()> {
    let cfg = run.cfg.clone();
    cfg.tokenizer.validate()?;
    cfg.train.validate()?;
    // Each file is deduplicated and split on its own; the parts are then joined.
    let mut train_set: Option<Corpus> = None;
    let mut dev_set: Option<Corpus> = None;
    let mut files = vec![("data", require(&opts.data, "--data")?)];
    if let Some(p) = &opts.data2 {
        files.push(("data2", p.as_path()));
    }
    for (role, path) in files {
        let mut data = run.load_corpus(role, path)?;
        if cfg.data.deduplicate {
            let (deduped, removed) = corpus::deduplicate(&data);
            if removed > 0 {
                eprintln!("{}: removed {removed} duplicate records", path.display());
            }
            data = deduped;
        }
        let (tr, dv) = match &opts.dev {
            Some(_) => (data, None),
            None => {
                let (tr, dv) = corpus::split(&data, cfg.data.dev_fraction, cfg.data.split_seed)?;
                (tr, Some(dv))
            }
        };
        train_set = Some(join(train_set, tr)?);
        if let Some(dv) = dv {
            dev_set = Some(join(dev_set, dv)?);
        }
    }
    let train_set = train_set.expect("--data is present");
    let dev_set = match (&opts.dev, dev_set) {
        (Some(dev_path), _) => run.load_corpus("dev", dev_path)?,
        (None, dev) => dev.expect("split produced a dev part"),
    };
    let vocab = match &opts.vocab {
        Some(path) => Vocabulary::from_text(&run.read_input("vocab", path)?)?,
        None => train_vocab(&vocab_texts(&train_set), &cfg.tokenizer),
    };
    let tokenizer = Tokenizer {
        config: cfg.tokenizer.clone(),
        vocab,
    };
    let ck_dir = run.out.join("checkpoints");
    let result = multi_run(&train_set, &dev_set, &tokenizer, &cfg.encoder, &cfg.train, Some(&ck_dir))?;
    for r in &result.runs {
        if let Some(p) = &r.checkpoint {
            if let Ok(rel) = p.strip_prefix(&run.out) {
                run.outputs.push(rel.display().to_string());
            }
        }
    }
    run.write("vocab.txt", &tokenizer.vocab.to_text())?;
    run.write("metrics.jsonl", &metrics_jsonl(&result.runs))?;

    #[derive(Serialize)]
    struct RunSummary {
        seed: u64,
        best_epoch: usize,
        dev: crate::eval::Metrics,
    }
    #[derive(Serialize)]
    struct Summary {
        mode: Mode,
        train_size: usize,
        dev_size: usize,
        runs: Vec<RunSummary>,
        aggregate: train::AggregateResult,
    }
    let summary = Summary {
        mode: cfg.train.input.mode,
        train_size: train_set.len(),
        dev_size: dev_set.len(),
        runs: result
            .runs
            .iter()
            .map(|r| RunSummary {
                seed: r.seed,
                best_epoch: r.best_epoch,
                dev: r.best,
            })
            .collect(),
        aggregate: result.aggregate.clone(),
    };
    run.write(
        "summary.json",
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    println!("P  R  F1 (macro, dev): {}", result.aggregate.table_row());
    Ok(())
}

/// Loads the checkpoint and rejects a `--mode` that disagrees with it.
fn load_checkpoint(run: &mut Run, opts: &Opts) -> Result<Checkpoint> {
    let path = require(&opts.checkpoint, "--checkpoint")?;
    let ck = Checkpoint::from_json(&run.read_input("checkpoint", path)?)?;
    if let Some(m) = opts.mode {
        if Mode::from(m) != ck.input.mode {
            return Err(Error::MixedModes);
        }
    }
    run.cfg.train.input = ck.input;
    run.cfg.encoder = ck.encoder.clone();
    run.cfg.tokenizer = ck.tokenizer.config.clone();
    Ok(ck)
}

fn checkpoint_predictions(run: &mut Run, opts: &Opts) -> Result<(Corpus, Vec<Label>)> {
    let ck = load_checkpoint(run, opts)?;
    let data = run.load_data(opts)?;
    let inputs = train::encode_corpus(&data, &ck.tokenizer, &ck.input)?;
    let preds = train::predict_labels(
        &ck.params,
        &ck.encoder,
        &inputs,
        run.cfg.train.eval_batch_size,
        run.cfg.train.execution,
    )?;
    Ok((data, preds))
}

fn evaluate(run: &mut Run, opts: &Opts) -> Result<()> {
    let (data, preds) = checkpoint_predictions(run, opts)?;
    let metrics = compute_metrics(&preds, &data.labels()?)?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    print!("{text}");
    run.write("metrics.json", &text)
}

pub fn format_predictions(ids: &[String], labels: &[Label]) -> String {
    ids.iter()
        .zip(labels)
        .map(|(id, l)| format!("{id},{l}\n"))
        .collect()
}

/// Parses `<id>,<LABEL>` lines; blank lines are skipped.
pub fn parse_predictions(text: &str) -> Result<HashMap<String, Label>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema { line: i + 1, message };
        let (id, label) = line
            .rsplit_once(',')
            .ok_or_else(|| schema("expected `<id>,<LABEL>`".into()))?;
        let label: Label = label.trim().parse().map_err(|e: Error| schema(e.to_string()))?;
        if map.insert(id.to_string(), label).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(map)
}

fn predict(run: &mut Run, opts: &Opts) -> Result<()> {
    let (data, preds) = checkpoint_predictions(run, opts)?;
    let ids: Vec<String> = data.records.iter().map(|r| r.id.clone()).collect();
    run.write("predictions.csv", &format_predictions(&ids, &preds))
}

fn aligned(map: &HashMap<String, Label>, data: &Corpus, which: &str) -> Result<Vec<Label>> {
    data.records
        .iter()
        .map(|r| {
            map.get(&r.id).copied().ok_or_else(|| {
                Error::format("predictions", format!("{which} file has no prediction for `{}`", r.id))
            })
        })
        .collect()
}

fn analyze(run: &mut Run, opts: &Opts) -> Result<()> {
    let to_path = require(&opts.to_preds, "--to-preds")?;
    let ca_path = require(&opts.ca_preds, "--ca-preds")?;
    let to_map = parse_predictions(&run.read_input("to_preds", to_path)?)?;
    let ca_map = parse_predictions(&run.read_input("ca_preds", ca_path)?)?;
    let data = run.load_data(opts)?;
    let golds = data.labels()?;
    let to = aligned(&to_map, &data, "TO")?;
    let ca = aligned(&ca_map, &data, "CA")?;
    let report = categorize_errors(&to, &ca, &golds, &data.records)?;
    println!(
        "TwCc={} TcCw={} TwCw={} TcCc={} n={}",
        report.counts.TwCc, report.counts.TcCw, report.counts.TwCw, report.counts.TcCc, report.n
    );
    run.write("report.txt", &report.to_text())?;
    run.write(
        "report.json",
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )
}

fn synth(run: &mut Run) -> Result<()> {
    let data = corpus::generate_synthetic(run.cfg.synth.n, run.cfg.synth.seed)?;
    run.write("synthetic.jsonl", &data.to_jsonl())
}
