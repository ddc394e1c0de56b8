use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latmem::backbone::{pretrain, BackboneConfig, PretrainOptions};
use latmem::bench::{self, BenchConfig, Dialogue, PretrainCorpusConfig};
use latmem::eval::{curve_csv, format_table, knowledge_csv, run_protocol, ProtocolOptions, SummaryRow};
use latmem::memory::{Capacity, Method, WriteConfig};
use latmem::train::{type1_train, TrainConfig};
use latmem::{Adapter32, Backbone32};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] latmem::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Missing(_) | CliError::Json(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "latmem", version, about = "Persistent latent-space memory for a frozen decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone.
    Pretrain(PretrainArgs),
    /// Write a synthetic multi-session corpus.
    GenBench(GenBenchArgs),
    /// Train one memory adapter on a corpus.
    TrainAdapter(TrainArgs),
    /// Score a method under the forgetting-curve protocol.
    Eval(EvalArgs),
    /// Merge evaluated runs into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON file with `backbone`, `corpus`, `options` and `heldout_docs`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct GenBenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_dialogues: Option<usize>,
    #[arg(long)]
    n_sessions: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// m1..m6, or `baseline` for evaluation.
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "1x")]
    capacity: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Share of dialogues held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Adapter checkpoint; defaults to the one in the run directory.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Evaluate a freshly initialised adapter as a control.
    #[arg(long)]
    untrained: bool,
    #[arg(long, default_value_t = 4)]
    max_answer_tokens: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainFile {
    backbone: BackboneConfig,
    corpus: PretrainCorpusConfig,
    heldout_docs: usize,
    options: PretrainOptions,
}

#[derive(Serialize, Deserialize)]
struct RunSummary {
    #[serde(flatten)]
    row: SummaryRow,
    untrained: bool,
    seed: u64,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(serde_json::from_str(&io(p, fs::read_to_string(p))?)?)
        }
        None => Ok(T::default()),
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(io(path, fs::read(path))?)))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(dir, fs::create_dir_all(dir))?;
    }
    io(path, fs::write(path, contents))
}

/// Adds one command's record to the run directory's manifest.
fn record_manifest(path: &Path, command: &str, entry: Value) -> Result<()> {
    let mut manifest: BTreeMap<String, Value> = if path.exists() {
        serde_json::from_str(&io(path, fs::read_to_string(path))?)?
    } else {
        BTreeMap::new()
    };
    manifest.insert(command.to_string(), entry);
    write(path, serde_json::to_string_pretty(&manifest)? + "\n")
}

fn parse_method(tag: &str) -> Result<Option<Method>> {
    if tag == "baseline" {
        return Ok(None);
    }
    tag.parse::<Method>()
        .map(Some)
        .map_err(|_| CliError::Usage(format!("unknown method `{tag}` (expected m1..m6 or baseline)")))
}

fn parse_capacity(tag: &str) -> Result<Capacity> {
    serde_json::from_value(Value::String(tag.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown capacity `{tag}` (expected 1x or 10x)")))
}

fn run_dir(run: &RunArgs, suffix: &str) -> PathBuf {
    run.runs_dir.join(format!("{}{suffix}_{}_{}", run.method, run.capacity, run.seed))
}

fn load_inputs(run: &RunArgs) -> Result<(Backbone32, Vec<Dialogue>)> {
    require(&run.backbone)?;
    require(&run.corpus)?;
    let backbone = Backbone32::load(&run.backbone)?;
    let (corpus, report) = bench::ingest(&run.corpus, backbone.vocab())?;
    if report.unknown_words > 0 {
        eprintln!("warning: {} words outside the vocabulary", report.unknown_words);
    }
    Ok((backbone, corpus))
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let mut file: PretrainFile = read_config(args.config.as_deref())?;
    if file.heldout_docs == 0 {
        file.heldout_docs = 200;
    }
    if let Some(seed) = args.seed {
        file.corpus.seed = seed;
        file.options.seed = seed;
    }
    if let Some(steps) = args.steps {
        file.options.steps = steps;
    }
    let vocab = bench::lexicon::vocabulary();
    let docs = bench::pretraining_corpus(&file.corpus, &vocab)?;
    let heldout_cfg = PretrainCorpusConfig {
        n_docs: file.heldout_docs,
        seed: file.corpus.seed.wrapping_add(0x9e37_79b9),
        ..file.corpus.clone()
    };
    let heldout = bench::pretraining_corpus(&heldout_cfg, &vocab)?;
    let (model, report) = pretrain::<f32>(&docs, &heldout, vocab, file.backbone.clone(), &file.options)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    let path = args.out.join("backbone.lmc");
    io(&args.out, fs::create_dir_all(&args.out))?;
    model.save(&path)?;
    write(&args.out.join("pretrain_report.json"), serde_json::to_string_pretty(&report)?)?;
    record_manifest(
        &args.out.join("manifest.json"),
        "pretrain",
        json!({
            "config": file,
            "heldout_corpus": heldout_cfg,
            "outputs": { "backbone": file_hash(&path)? },
            "backbone_fingerprint": model.fingerprint(),
        }),
    )?;
    println!(
        "held-out loss {:.4} -> {:.4}; backbone written to {}",
        report.initial_heldout_loss,
        report.final_heldout_loss,
        path.display()
    );
    Ok(())
}

fn cmd_gen_bench(args: &GenBenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_dialogues {
        cfg.n_dialogues = n;
    }
    if let Some(n) = args.n_sessions {
        cfg.n_sessions = n;
    }
    let corpus = bench::generate(&cfg)?;
    bench::export_to(&args.out, &corpus)?;
    let manifest = args.out.with_extension("manifest.json");
    record_manifest(
        &manifest,
        "gen-bench",
        json!({ "config": cfg, "outputs": { "corpus": file_hash(&args.out)? } }),
    )?;
    let questions: usize = corpus.iter().map(|d| d.qa.len()).sum();
    println!("{} dialogues, {questions} questions -> {}", corpus.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let method = parse_method(&args.run.method)?
        .ok_or_else(|| CliError::Usage("the baseline has no adapter to train".into()))?;
    let capacity = parse_capacity(&args.run.capacity)?;
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    cfg.seed = args.run.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = lr;
    }
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(CliError::Usage("--val-fraction must lie in [0, 1)".into()));
    }
    let (backbone, corpus) = load_inputs(&args.run)?;
    if corpus.len() < 2 {
        return Err(CliError::Usage("training needs at least two dialogues".into()));
    }
    let n_val = ((corpus.len() as f64 * args.val_fraction).round() as usize).clamp(1, corpus.len() - 1);
    let (train, val) = corpus.split_at(corpus.len() - n_val);
    let write_cfg = WriteConfig::new(capacity);
    let mut adapter = Adapter32::new(method, write_cfg.clone(), backbone.config(), args.run.seed)?;
    let dir = run_dir(&args.run, "");
    io(&dir, fs::create_dir_all(&dir))?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = io(&log_path, fs::File::create(&log_path))?;
    let mut log_error = None;
    let report = type1_train(&backbone, &mut adapter, train, val, &cfg, |step| {
        let line = serde_json::to_string(step).expect("log entries serialise");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(CliError::Io {
            path: log_path,
            source: e,
        });
    }
    let path = dir.join("adapter.lmc");
    adapter.save(&path)?;
    write(&dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    record_manifest(
        &dir.join("manifest.json"),
        "train-adapter",
        json!({
            "method": method,
            "capacity": capacity,
            "seed": args.run.seed,
            "config": cfg,
            "write": write_cfg,
            "val_fraction": args.val_fraction,
            "trainable_parameters": adapter.params().iter().map(|p| p.value.numel()).sum::<usize>(),
            "inputs": { "backbone": file_hash(&args.run.backbone)?, "corpus": file_hash(&args.run.corpus)? },
            "outputs": { "adapter": file_hash(&path)? },
        }),
    )?;
    println!(
        "{method} {capacity}: validation loss {:.4} -> {:.4} over {} steps; adapter written to {}",
        report.initial_val_loss,
        report.best_val_loss,
        report.steps.len(),
        path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let method = parse_method(&args.run.method)?;
    let capacity = parse_capacity(&args.run.capacity)?;
    let (backbone, corpus) = load_inputs(&args.run)?;
    let suffix = if args.untrained { "-untrained" } else { "" };
    let dir = run_dir(&args.run, suffix);
    let adapter_path = args
        .adapter
        .clone()
        .unwrap_or_else(|| run_dir(&args.run, "").join("adapter.lmc"));
    let adapter = match method {
        None => None,
        Some(m) if args.untrained => {
            let mut a = Adapter32::new(m, WriteConfig::new(capacity), backbone.config(), args.run.seed)?;
            a.freeze();
            Some(a)
        }
        Some(m) => {
            require(&adapter_path)?;
            let a = Adapter32::load(&adapter_path, backbone.config())?;
            if a.method() != m || a.capacity() != capacity {
                return Err(latmem::Error::MethodMismatch {
                    expected: format!("{m} {capacity}"),
                    found: format!("{} {}", a.method(), a.capacity()),
                }
                .into());
            }
            Some(a)
        }
    };
    let opts = ProtocolOptions {
        max_answer_tokens: args.max_answer_tokens,
    };
    let out = run_protocol(&backbone, adapter.as_ref(), &corpus, &opts)?;
    io(&dir, fs::create_dir_all(&dir))?;
    let mut rows = String::new();
    for r in &out.results {
        rows.push_str(&serde_json::to_string(r)?);
        rows.push('\n');
    }
    write(&dir.join("results.jsonl"), rows)?;
    write(&dir.join("curve.csv"), curve_csv(&out.curve))?;
    write(&dir.join("knowledge.csv"), knowledge_csv(&out.knowledge))?;
    let mut row = out.summary.clone();
    row.capacity = Some(capacity);
    let summary = RunSummary {
        row,
        untrained: args.untrained,
        seed: args.run.seed,
    };
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut inputs = json!({
        "backbone": file_hash(&args.run.backbone)?,
        "corpus": file_hash(&args.run.corpus)?,
    });
    if method.is_some() && !args.untrained {
        inputs["adapter"] = Value::String(file_hash(&adapter_path)?);
    }
    record_manifest(
        &dir.join("manifest.json"),
        "eval",
        json!({
            "method": args.run.method,
            "capacity": capacity,
            "seed": args.run.seed,
            "untrained": args.untrained,
            "options": opts,
            "inputs": inputs,
        }),
    )?;
    print!("{}", format_table(std::slice::from_ref(&summary.row)));
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    require(&args.runs_dir)?;
    let mut entries: Vec<PathBuf> = io(&args.runs_dir, fs::read_dir(&args.runs_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").exists())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(CliError::Usage(format!("no evaluated runs under {}", args.runs_dir.display())));
    }
    let mut corpus_hash: Option<(String, PathBuf)> = None;
    let mut rows = Vec::new();
    for dir in entries {
        let manifest: Value = serde_json::from_str(&io(&dir, fs::read_to_string(dir.join("manifest.json")))?)?;
        let hash = manifest["eval"]["inputs"]["corpus"]
            .as_str()
            .ok_or_else(|| CliError::Usage(format!("{}: manifest lacks a corpus hash", dir.display())))?
            .to_string();
        match &corpus_hash {
            Some((h, first)) if h != &hash => {
                return Err(CliError::Usage(format!(
                    "runs {} and {} were evaluated on different corpora",
                    first.display(),
                    dir.display()
                )));
            }
            Some(_) => {}
            None => corpus_hash = Some((hash, dir.clone())),
        }
        let summary: RunSummary = serde_json::from_str(&io(&dir, fs::read_to_string(dir.join("summary.json")))?)?;
        if !summary.untrained {
            rows.push(summary.row);
        }
    }
    let table = format_table(&rows);
    print!("{table}");
    if let Some(out) = &args.out {
        write(out, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::GenBench(a) => cmd_gen_bench(a),
        Command::TrainAdapter(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
