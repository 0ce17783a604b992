//! `sac`: corpus preparation, training, evaluation and inspection for the
//! sentence attention classifier.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use sac_core::checkpoint::Checkpoint;
use sac_core::corpus::{
    build_vocabulary, load_corpus, split_dataset, stats_report, CorpusReader, SplitName,
};
use sac_core::encoder::EncoderKind;
use sac_core::gradcheck::{grad_check, GradCheckConfig};
use sac_core::head::{AttentionMode, DEFAULT_THRESHOLD};
use sac_core::segmenter::segment;
use sac_core::trainer::{
    evaluate, predict_record, records_in_split, train, EvalOptions, TrainError,
};
use serde_json::json;

use crate::config::{load_config, parse_attention, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "sac",
    version,
    about = "Multi-label patent classification with label-wise sentence attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the top-C label vocabulary from the training split.
    BuildVocab(CorpusArgs),
    /// Assign every record id to train, validation or test.
    Split(CorpusArgs),
    /// Per-code document counts with dropped and skipped totals.
    Stats(CorpusArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score one split of a corpus against a checkpoint.
    Evaluate(EvaluateArgs),
    /// Score every record of a corpus file.
    Predict(PredictArgs),
    /// Split standard input into sentences.
    Segment(SegmentArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// `key = value` configuration file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the train/validation/test split and initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    corpus: PathBuf,
    #[arg(long)]
    top_c: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    top_c: Option<usize>,
    #[arg(long)]
    v_buckets: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Feed-forward width of the mini-transformer.
    #[arg(long)]
    f: Option<usize>,
    /// mean-pool or mini-transformer.
    #[arg(long)]
    encoder: Option<EncoderKind>,
    /// learned or uniform.
    #[arg(long, value_parser = parse_attention)]
    attention: Option<AttentionMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Append the description field to title and abstract.
    #[arg(long)]
    use_description: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    corpus: PathBuf,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Debug, Args)]
struct TextFlags {
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    use_description: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    checkpoint: PathBuf,
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitName,
    #[command(flatten)]
    text: TextFlags,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    checkpoint: PathBuf,
    corpus: PathBuf,
    /// Include each label's weights over the document's sentences.
    #[arg(long)]
    dump_attention: bool,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[command(flatten)]
    text: TextFlags,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long, default_value_t = sac_core::segmenter::DEFAULT_K_MAX)]
    k_max: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "mean-pool")]
    encoder: EncoderKind,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    instances: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Failure::Numeric(e.into()),
            TrainError::Config(msg) => Failure::Usage(msg),
            other => Failure::Data(other.into()),
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

fn overrides(config: Option<&Path>, flags: Overrides) -> Result<Overrides, Failure> {
    let file = match config {
        Some(path) => load_config(path)?,
        None => Overrides::default(),
    };
    Ok(file.then(flags))
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(data)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(data),
        None => io::stdout().write_all(text.as_bytes()).map_err(data),
    }
}

fn corpus_command(kind: &str, args: &CorpusArgs) -> Result<(), Failure> {
    let flags = Overrides {
        top_c: args.top_c,
        seed: args.common.seed,
        ..Overrides::default()
    };
    let config = overrides(args.common.config.as_deref(), flags)?.resolve();
    let (records, ingest) = load_corpus(&args.corpus).map_err(data)?;
    eprintln!(
        "read {} records, retained {}, skipped {}",
        ingest.read,
        ingest.retained,
        ingest.skipped.total()
    );
    let value = match kind {
        "build-vocab" => {
            let train = records_in_split(&records, SplitName::Train, config.seed);
            let vocab = build_vocabulary(train, config.top_c).map_err(TrainError::from)?;
            json!({ "codes": vocab.codes, "counts": vocab.counts })
        }
        "split" => {
            let split =
                split_dataset(records.iter().map(|r| r.id.as_str()), config.seed).map_err(data)?;
            serde_json::to_value(&split).map_err(data)?
        }
        _ => {
            let vocab = build_vocabulary(&records, config.top_c).map_err(TrainError::from)?;
            stats_report(&records, &vocab, &ingest)
        }
    };
    emit(&value, args.common.out.as_deref())
}

fn train_command(args: &TrainArgs) -> Result<(), Failure> {
    let m = &args.model;
    let flags = Overrides {
        h: m.h,
        top_c: m.top_c,
        v_buckets: m.v_buckets,
        t_max: m.t_max,
        k_max: m.k_max,
        f: m.f,
        encoder: m.encoder,
        attention: m.attention,
        lr: m.lr,
        init_scale: m.init_scale,
        batch_size: m.batch_size,
        max_epochs: m.max_epochs,
        patience: m.patience,
        seed: args.seed,
        use_description: m.use_description.then_some(true),
        ..Overrides::default()
    };
    let config = overrides(args.config.as_deref(), flags)?.resolve();
    let mut log = match &args.log {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(data)?)),
        None => None,
    };
    let mut log_error = None;
    let result = train(&config, &args.corpus, |entry| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val micro-F1 {:.4}  macro-F1 {:.4}",
            entry.epoch, entry.train_loss, entry.val_micro_f1, entry.val_macro_f1
        );
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(entry).expect("log entries serialize");
            if let Err(e) = writeln!(w, "{line}") {
                log_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(mut w) = log {
        w.flush().map_err(data)?;
    }
    if let Some(e) = log_error {
        return Err(data(e));
    }
    result.checkpoint.save(&args.out).map_err(data)?;
    eprintln!(
        "saved epoch {} (validation micro-F1 {:.4}) to {}",
        result.outcome.meta.best_epoch,
        result.outcome.meta.best_val_micro_f1,
        args.out.display()
    );
    emit(
        &json!({
            "checkpoint": args.out.display().to_string(),
            "labels": result.checkpoint.vocab.codes,
            "dropped": result.dropped,
            "meta": result.outcome.meta,
            "config": config,
        }),
        None,
    )
}

fn eval_options(
    config: Option<&Path>,
    seed: Option<u64>,
    text: &TextFlags,
) -> Result<EvalOptions, Failure> {
    let flags = Overrides {
        seed,
        k_max: text.k_max,
        use_description: text.use_description.then_some(true),
        ..Overrides::default()
    };
    let config = overrides(config, flags)?.resolve();
    Ok(EvalOptions {
        seed: config.seed,
        k_max: config.k_max,
        use_description: config.use_description,
        ..EvalOptions::default()
    })
}

fn evaluate_command(args: &EvaluateArgs) -> Result<(), Failure> {
    let options = eval_options(args.common.config.as_deref(), args.common.seed, &args.text)?;
    let checkpoint = Checkpoint::load(&args.checkpoint).map_err(data)?;
    let report = evaluate(&checkpoint, &args.corpus, args.split, &options)?;
    eprintln!(
        "{} split: micro-F1 {:.4}, macro-F1 {:.4}",
        args.split, report.micro_avg.f1, report.macro_avg.f1
    );
    emit(
        &serde_json::to_value(&report).map_err(data)?,
        args.common.out.as_deref(),
    )
}

fn predict_command(args: &PredictArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Failure::Usage("threshold must lie in [0, 1]".into()));
    }
    let options = EvalOptions {
        threshold: args.threshold,
        ..eval_options(args.config.as_deref(), None, &args.text)?
    };
    let checkpoint = Checkpoint::load(&args.checkpoint).map_err(data)?;
    let mut reader = CorpusReader::open(&args.corpus).map_err(data)?;
    let mut predictions = Vec::new();
    for item in reader.by_ref() {
        match item {
            Ok(record) => predictions.push(predict_record(
                &checkpoint,
                &record,
                &options,
                args.dump_attention,
            )?),
            Err(skip) => eprintln!("line {}: skipped ({:?})", skip.line, skip.reason),
        }
    }
    eprintln!("scored {} records", predictions.len());
    emit(
        &serde_json::to_value(&predictions).map_err(data)?,
        args.out.as_deref(),
    )
}

fn segment_command(args: &SegmentArgs) -> Result<(), Failure> {
    if args.k_max == 0 {
        return Err(Failure::Usage("k_max must be positive".into()));
    }
    let mut text = String::new();
    io::stdin().read_to_string(&mut text).map_err(data)?;
    let sentences: Vec<String> = segment(&text, args.k_max)
        .map_err(data)?
        .into_iter()
        .map(|s| s.text)
        .collect();
    emit(&json!(sentences), None)
}

fn gradcheck_command(args: &GradcheckArgs) -> Result<(), Failure> {
    if !(args.eps.is_finite() && args.eps > 0.0) || args.instances == 0 {
        return Err(Failure::Usage("eps and instances must be positive".into()));
    }
    let config = GradCheckConfig {
        kind: args.encoder,
        eps: args.eps,
        instances: args.instances,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&config).map_err(data)?;
    eprintln!(
        "{} parameters checked over {} instance(s)",
        report.params_checked, report.instances
    );
    emit(
        &json!({
            "encoder": args.encoder,
            "max_rel_error": report.max_rel_error,
            "worst_param": report.worst_param,
            "params_checked": report.params_checked,
            "instances": report.instances,
        }),
        None,
    )
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::BuildVocab(args) => corpus_command("build-vocab", args),
        Command::Split(args) => corpus_command("split", args),
        Command::Stats(args) => corpus_command("stats", args),
        Command::Train(args) => train_command(args),
        Command::Evaluate(args) => evaluate_command(args),
        Command::Predict(args) => predict_command(args),
        Command::Segment(args) => segment_command(args),
        Command::Gradcheck(args) => gradcheck_command(args),
    }
}

fn print_subcommand_help(args: &[String]) {
    let mut command = Cli::command();
    let name = args.iter().skip(1).find(|a| !a.starts_with('-'));
    if let Some(sub) = name.and_then(|n| command.find_subcommand_mut(n)) {
        let _ = writeln!(io::stderr(), "\n{}", sub.render_help());
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            print_subcommand_help(&args);
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            print_subcommand_help(&args);
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
