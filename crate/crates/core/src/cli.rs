//! The `qe-contrast` command: `synth | ingest | train | eval | sweep | embed`.
//!
//! Every subcommand writes `runspec.json` into its output directory. It holds
//! the argument vector and the resolved arguments; running the binary with
//! that `argv` again reproduces the outputs byte for byte.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use crate::corpus::{
    generate_synthetic, parse_dataset, prepare, to_native_jsonl, Dataset, DatasetFormat,
    QuestionTypes, SynthConfig, Vocabulary,
};
use crate::error::Error;
use crate::eval::{
    embedding_dump, evaluate_instances, paired_bootstrap, predictions_csv, summarize,
};
use crate::loss::{LossConfig, QeVariant};
use crate::model::Model;
use crate::similarity::{default_rank_grid, SimilarityKind};
use crate::trainer::{
    grid_search, init_model, train_with, AdamConfig, EncoderShape, GridSpec, TrainConfig,
};

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  internal error
  2  usage error (unknown flag, missing or invalid value)
  3  i/o error (missing input, unwritable output)
  4  parse or schema error in an input file or checkpoint
  5  invalid configuration
  6  numerical failure (non-finite values, degenerate vectors)

On failure one JSON object is written to stderr:
  {\"error\":\"<kind>\",\"code\":<status>,\"message\":\"...\"}";

pub const RUNSPEC_FILE: &str = "runspec.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.qeck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "train_config.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Parser)]
#[command(
    name = "qe-contrast",
    version,
    about = "Question-evidence contrastive training and evaluation",
    after_help = EXIT_CODES
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a planted-structure synthetic dataset.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Convert a hotpot-like or qasper-like file to the native format.
    #[command(after_help = EXIT_CODES)]
    Ingest(IngestArgs),
    /// Train a model and write its checkpoint and per-epoch metrics.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Score a trained model, or compare two prediction files.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Grid search over temperature, lambda and projection rank.
    #[command(after_help = EXIT_CODES)]
    Sweep(SweepArgs),
    /// Export a PCA projection of question and sentence embeddings.
    #[command(after_help = EXIT_CODES)]
    Embed(EmbedArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Embed(_) => "embed",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Number of instances.
    #[arg(long, default_value_t = SynthConfig::default().num_instances)]
    pub num: usize,
    /// Sentences per instance.
    #[arg(long, default_value_t = SynthConfig::default().m)]
    pub m: usize,
    /// Evidence sentences per instance.
    #[arg(long, default_value_t = SynthConfig::default().n)]
    pub n: usize,
    /// Number of question types.
    #[arg(long, default_value_t = SynthConfig::default().num_types)]
    pub types: usize,
    #[arg(long, default_value_t = SynthConfig::default().vocab_size)]
    pub vocab_size: usize,
    /// Share of an evidence sentence copied from the question.
    #[arg(long, default_value_t = SynthConfig::default().overlap_strength)]
    pub overlap: f64,
    #[arg(long, default_value_t = SynthConfig::default().segment_len)]
    pub segment_len: usize,
    #[arg(long, default_value_t = SynthConfig::default().sentence_len)]
    pub sentence_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            num_instances: self.num,
            m: self.m,
            n: self.n,
            vocab_size: self.vocab_size,
            num_types: self.types,
            overlap_strength: self.overlap,
            seed: self.seed,
            segment_len: self.segment_len,
            sentence_len: self.sentence_len,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = DatasetFormat::HotpotLike)]
    pub format: DatasetFormat,
    /// Question-type labels, comma separated; defaults to the format's own set.
    #[arg(long, value_delimiter = ',')]
    pub types: Option<Vec<String>>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimArg {
    Dot,
    Cosine,
    Bilinear,
    ProjectedCosine,
}

/// Every training hyperparameter.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Peak learning rate of the triangular schedule.
    #[arg(long, default_value_t = TrainConfig::default().peak_lr)]
    pub lr: f64,
    /// Fraction of steps spent warming up.
    #[arg(long, default_value_t = TrainConfig::default().warmup_frac)]
    pub warmup: f64,
    #[arg(long, default_value_t = AdamConfig::default().beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = AdamConfig::default().beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = AdamConfig::default().eps)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the contrastive loss; 0 trains the evidence classifier only.
    #[arg(long, default_value_t = LossConfig::default().lambda)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = SimArg::ProjectedCosine)]
    pub similarity: SimArg,
    /// Projection rank for projected-cosine; defaults to --d.
    #[arg(long)]
    pub rank: Option<usize>,
    /// One temperature, or one per question type, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = TrainConfig::default().temperatures)]
    pub tau: Vec<f64>,
    /// Use one projection for every question type.
    #[arg(long)]
    pub shared_projection: bool,
    /// Drop the wrong-type augmented negatives.
    #[arg(long)]
    pub no_augment: bool,
    /// Keep instances without evidence in the contrastive loss (they add nothing).
    #[arg(long)]
    pub keep_no_evidence: bool,
    #[arg(long, value_enum, default_value_t = QeVariant::LogOfSum)]
    pub qe_variant: QeVariant,
    /// Dropout on the projected vectors.
    #[arg(long, default_value_t = TrainConfig::default().dropout)]
    pub dropout: f64,
    #[arg(long, default_value_t = EncoderShape::default().d)]
    pub d: usize,
    #[arg(long, default_value_t = EncoderShape::default().layers)]
    pub layers: usize,
    #[arg(long, default_value_t = EncoderShape::default().ffn_mult)]
    pub ffn_mult: usize,
    #[arg(long, default_value_t = EncoderShape::default().max_len)]
    pub max_len: usize,
    /// Additive attention bias towards marker keys.
    #[arg(long, default_value_t = EncoderShape::default().marker_key_bias)]
    pub marker_key_bias: f64,
    /// Fill the seconds column of the metrics (breaks byte-identical reruns).
    #[arg(long)]
    pub record_wall_time: bool,
}

impl ModelArgs {
    pub fn to_config(&self) -> Result<TrainConfig, CliError> {
        let kind = match self.similarity {
            SimArg::Dot => SimilarityKind::Dot,
            SimArg::Cosine => SimilarityKind::Cosine,
            SimArg::Bilinear => SimilarityKind::Bilinear,
            SimArg::ProjectedCosine => SimilarityKind::ProjectedCosine {
                rank: self.rank.unwrap_or(self.d),
            },
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.lr,
            warmup_frac: self.warmup,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            seed: self.seed,
            loss: LossConfig {
                lambda: self.lambda,
                kind,
                augment_wrong_type: !self.no_augment,
                skip_no_evidence: !self.keep_no_evidence,
                variant: self.qe_variant,
            },
            encoder: EncoderShape {
                d: self.d,
                layers: self.layers,
                ffn_mult: self.ffn_mult,
                max_len: self.max_len,
                marker_key_bias: self.marker_key_bias,
            },
            temperatures: self.tau.clone(),
            shared_projection: self.shared_projection,
            dropout: self.dropout,
            record_wall_time: self.record_wall_time,
        };
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()).into());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        let (similarity, rank) = match cfg.loss.kind {
            SimilarityKind::Dot => (SimArg::Dot, None),
            SimilarityKind::Cosine => (SimArg::Cosine, None),
            SimilarityKind::Bilinear => (SimArg::Bilinear, None),
            SimilarityKind::ProjectedCosine { rank } => (SimArg::ProjectedCosine, Some(rank)),
        };
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.peak_lr,
            warmup: cfg.warmup_frac,
            beta1: cfg.adam.beta1,
            beta2: cfg.adam.beta2,
            adam_eps: cfg.adam.eps,
            seed: cfg.seed,
            lambda: cfg.loss.lambda,
            similarity,
            rank,
            tau: cfg.temperatures.clone(),
            shared_projection: cfg.shared_projection,
            no_augment: !cfg.loss.augment_wrong_type,
            keep_no_evidence: !cfg.loss.skip_no_evidence,
            qe_variant: cfg.loss.variant,
            dropout: cfg.dropout,
            d: cfg.encoder.d,
            layers: cfg.encoder.layers,
            ffn_mult: cfg.encoder.ffn_mult,
            max_len: cfg.encoder.max_len,
            marker_key_bias: cfg.encoder.marker_key_bias,
            record_wall_time: cfg.record_wall_time,
        }
    }

    /// Flags that parse back to exactly these arguments.
    pub fn to_flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |name: &str, value: String| {
            out.push(format!("--{name}"));
            out.push(value);
        };
        push("epochs", self.epochs.to_string());
        push("batch-size", self.batch_size.to_string());
        push("lr", self.lr.to_string());
        push("warmup", self.warmup.to_string());
        push("beta1", self.beta1.to_string());
        push("beta2", self.beta2.to_string());
        push("adam-eps", self.adam_eps.to_string());
        push("seed", self.seed.to_string());
        push("lambda", self.lambda.to_string());
        push("similarity", value_name(self.similarity));
        if let Some(r) = self.rank {
            push("rank", r.to_string());
        }
        push(
            "tau",
            self.tau
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        push("qe-variant", value_name(self.qe_variant));
        push("dropout", self.dropout.to_string());
        push("d", self.d.to_string());
        push("layers", self.layers.to_string());
        push("ffn-mult", self.ffn_mult.to_string());
        push("max-len", self.max_len.to_string());
        push("marker-key-bias", self.marker_key_bias.to_string());
        for (on, name) in [
            (self.shared_projection, "--shared-projection"),
            (self.no_augment, "--no-augment"),
            (self.keep_no_evidence, "--keep-no-evidence"),
            (self.record_wall_time, "--record-wall-time"),
        ] {
            if on {
                out.push(name.to_string());
            }
        }
        out
    }
}

fn value_name(v: impl ValueEnum) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Native training dataset.
    #[arg(long)]
    pub train: PathBuf,
    /// Native validation dataset; adds `val` rows to the metrics.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairedMetric {
    Ap,
    F1,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long, requires = "data")]
    pub model_dir: Option<PathBuf>,
    /// Native dataset to score.
    #[arg(long, requires = "model_dir")]
    pub data: Option<PathBuf>,
    /// Predictions of the system claimed to be better.
    #[arg(long, requires = "predictions_b")]
    pub predictions_a: Option<PathBuf>,
    #[arg(long, requires = "predictions_a")]
    pub predictions_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PairedMetric::Ap)]
    pub metric: PairedMetric,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Temperature grid; replaces --tau.
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::defaults(1).taus)]
    pub taus: Vec<f64>,
    /// Lambda grid; replaces --lambda.
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::defaults(1).lambdas)]
    pub lambdas: Vec<f64>,
    /// Projection rank grid; defaults to d, d/2, d/4, d/8.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Search one temperature per question type instead of a shared one.
    #[arg(long)]
    pub untie_tau: bool,
    /// Cells trained at once; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    pub max_parallel: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N instances.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Leave out evidence projected with the wrong question types.
    #[arg(long)]
    pub no_wrong_type: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

/// Written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub subcommand: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub resolved: serde_json::Value,
    pub version: String,
}

impl RunSpec {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::parse(path, e))
    }
}

/// Everything `eval` and `embed` need besides the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub question_types: Vec<String>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: &'static str,
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, code: i32, message: impl Into<String>) -> Self {
        Self {
            kind,
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", 2, message)
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", 3, format!("{}: {e}", path.display()))
    }

    fn parse(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new("parse", 4, format!("{}: {e}", path.display()))
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new("config", 5, message)
    }

    fn at(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }

    pub fn json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "code": self.code,
            "message": self.message,
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io(_) => ("io", 3),
            Error::Parse { .. } => ("parse", 4),
            Error::Schema { .. } | Error::MalformedInstance(_) => ("schema", 4),
            Error::Checkpoint(_) => ("checkpoint", 4),
            Error::Config(_) | Error::Length { .. } => ("config", 5),
            Error::NonFinite { .. } | Error::DegenerateVector { .. } | Error::UndefinedAp => {
                ("numerical", 6)
            }
            Error::Shape(_) | Error::Replay(_) | Error::Contract(_) => ("internal", 1),
        };
        Self::new(kind, code, e.to_string())
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status. Failures are reported on stderr as one JSON line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    2
                }
                _ => {
                    let rendered = e.render().to_string();
                    let first = rendered.lines().next().unwrap_or_default();
                    let msg = first.strip_prefix("error: ").unwrap_or(first);
                    eprintln!("{}", CliError::usage(msg).json_line());
                    2
                }
            };
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.json_line());
            e.code
        }
    }
}

/// Runs an already parsed command; `argv` is recorded in the run spec.
pub fn execute(command: &Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a, command, argv),
        Command::Ingest(a) => ingest(a, command, argv),
        Command::Train(a) => train_cmd(a, command, argv),
        Command::Eval(a) => eval_cmd(a, command, argv),
        Command::Sweep(a) => sweep(a, command, argv),
        Command::Embed(a) => embed(a, command, argv),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_runspec(dir: &Path, command: &Command, argv: &[String]) -> Result<(), CliError> {
    let spec = RunSpec {
        subcommand: command.name().to_string(),
        argv: argv.to_vec(),
        resolved: serde_json::to_value(command).expect("arguments serialize"),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(dir, RUNSPEC_FILE, &spec)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write(dir, name, text).map(|_| ())
}

fn load_dataset(path: &Path, types: Option<&QuestionTypes>) -> Result<Dataset, CliError> {
    let bytes = read(path)?;
    parse_dataset(&bytes, DatasetFormat::Native, types).map_err(|e| CliError::from(e).at(path))
}

fn load_model(dir: &Path) -> Result<(Model, Vocabulary, QuestionTypes, TrainConfig), CliError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: ModelManifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| CliError::parse(&manifest_path, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab: Vocabulary =
        serde_json::from_slice(&read(&vocab_path)?).map_err(|e| CliError::parse(&vocab_path, e))?;
    let types = QuestionTypes::new(manifest.question_types)?;
    let mut model = init_model(&manifest.config, types.len(), vocab.len())?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let stored =
        read_checkpoint(&read(&ckpt_path)?).map_err(|e| CliError::from(e).at(&ckpt_path))?;
    load_into(&mut model, stored).map_err(|e| CliError::from(e).at(&ckpt_path))?;
    Ok((model, vocab, types, manifest.config))
}

fn synth(a: &SynthArgs, command: &Command, argv: &[String]) -> Result<(), CliError> {
    let cfg = a.to_config();
    cfg.validate()?;
    prepare_dir(&a.out_dir)?;
    write_runspec(&a.out_dir, command, argv)?;
    let data = generate_synthetic(&cfg)?;
    let path = write(&a.out_dir, DATASET_FILE, to_native_jsonl(&data))?;
    println!(
        "wrote {} ({} instances)",
        path.display(),
        data.instances.len()
    );
    Ok(())
}

fn ingest(a: &IngestArgs, command: &Command, argv: &[String]) -> Result<(), CliError> {
    let types = a.types.clone().map(QuestionTypes::new).transpose()?;
    prepare_dir(&a.out_dir)?;
    write_runspec(&a.out_dir, command, argv)?;
    let bytes = read(&a.input)?;
    let data = parse_dataset(&bytes, a.format, types.as_ref())
        .map_err(|e| CliError::from(e).at(&a.input))?;
    let path = write(&a.out_dir, DATASET_FILE, to_native_jsonl(&data))?;
    println!(
        "wrote {} ({} instances)",
        path.display(),
        data.instances.len()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, command: &Command, argv: &[String]) -> Result<(), CliError> {
    let cfg = a.model.to_config()?;
    let train_set = load_dataset(&a.train, None)?;
    let val_set = a
        .val
        .as_deref()
        .map(|p| load_dataset(p, Some(&train_set.types)))
        .transpose()?;
    prepare_dir(&a.out_dir)?;
    write_runspec(&a.out_dir, command, argv)?;

    let out = train_with(&train_set, val_set.as_ref(), &cfg, |metrics, _| {
        if let Some(r) = metrics.rows.last() {
            println!(
                "epoch {}/{} {} loss {:.4} f1 {:.3}",
                r.epoch, cfg.epochs, r.split, r.loss_combined, r.evidence_f1
            );
        }
        fs::write(a.out_dir.join(METRICS_FILE), metrics.to_csv()).map_err(Error::Io)
    })?;
    write(&a.out_dir, CHECKPOINT_FILE, write_checkpoint(&out.model))?;
    write(&a.out_dir, METRICS_FILE, out.metrics.to_csv())?;
    write_json(&a.out_dir, VOCAB_FILE, &out.vocab)?;
    write_json(
        &a.out_dir,
        MANIFEST_FILE,
        &ModelManifest {
            question_types: out.types.labels().to_vec(),
            config: cfg,
        },
    )?;
    println!("wrote model to {}", a.out_dir.display());
    Ok(())
}

/// Per-id values of one column of a predictions CSV; empty cells are `None`.
fn read_predictions(
    path: &Path,
    metric: PairedMetric,
) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::parse(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let column = match metric {
        PairedMetric::Ap => "ap",
        PairedMetric::F1 => "f1",
    };
    let find = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| {
            CliError::new(
                "schema",
                4,
                format!("{}: no `{name}` column", path.display()),
            )
        })
    };
    let (id_col, value_col) = (find("id")?, find(column)?);
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(CliError::new(
                "schema",
                4,
                format!(
                    "{} line {}: {} cells, header has {}",
                    path.display(),
                    i + 2,
                    cells.len(),
                    header.len()
                ),
            ));
        }
        let cell = cells[value_col];
        let value = if cell.is_empty() {
            None
        } else {
            Some(
                cell.parse::<f64>()
                    .map_err(|e| CliError::parse(path, format!("line {}: {e}", i + 2)))?,
            )
        };
        out.push((cells[id_col].to_string(), value));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct BootstrapResult {
    metric: PairedMetric,
    pairs: usize,
    mean_a: f64,
    mean_b: f64,
    resamples: usize,
    seed: u64,
    /// Share of resamples where A is not better than B.
    p_value: f64,
}

fn eval_cmd(a: &EvalArgs, command: &Command, argv: &[String]) -> Result<(), CliError> {
    if a.model_dir.is_none() && a.predictions_a.is_none() {
        return Err(CliError::usage(
            "give --model-dir with --data, or --predictions-a with --predictions-b",
        ));
    }
    if a.resamples == 0 {
        return Err(CliError::config("resamples must be positive"));
    }
    prepare_dir(&a.out_dir)?;
    write_runspec(&a.out_dir, command, argv)?;

    if let (Some(dir), Some(data_path)) = (&a.model_dir, &a.data) {
        let (model, vocab, types, cfg) = load_model(dir)?;
        let data = load_dataset(data_path, Some(&types))?;
        let encoded = prepare(&data.instances, &vocab)?;
        let evals = evaluate_instances(&model, &encoded, &cfg.loss, cfg.loss.ranking_kind())?;
        let report = summarize(&types, &evals);
        write(&a.out_dir, "report.csv", report.to_csv())?;
        write(
            &a.out_dir,
            "predictions.csv",
            predictions_csv(&types, &evals),
        )?;
        print!("{}", report.to_csv());
    }

    if let (Some(pa), Some(pb)) = (&a.predictions_a, &a.predictions_b) {
        let rows_a = read_predictions(pa, a.metric)?;
        let rows_b: HashMap<String, Option<f64>> =
            read_predictions(pb, a.metric)?.into_iter().collect();
        if rows_a.len() != rows_b.len() {
            return Err(CliError::config(format!(
                "prediction files cover {} and {} instances",
                rows_a.len(),
                rows_b.len()
            )));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (id, va) in &rows_a {
            let vb = rows_b.get(id).ok_or_else(|| {
                CliError::config(format!("instance {id} missing from {}", pb.display()))
            })?;
            if let (Some(x), Some(y)) = (va, vb) {
                xs.push(*x);
                ys.push(*y);
            }
        }
        let p = paired_bootstrap(&xs, &ys, a.resamples, a.bootstrap_seed)
            .map_err(|e| CliError::config(e.to_string()))?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let result = BootstrapResult {
            metric: a.metric,
            pairs: xs.len(),
            mean_a: mean(&xs),
            mean_b: mean(&ys),
            resamples: a.resamples,
            seed: a.bootstrap_seed,
            p_value: p,
        };
        write_json(&a.out_dir, "bootstrap.json", &result)?;
        println!(
            "mean a {:.4} mean b {:.4} over {} pairs, p = {}",
            result.mean_a, result.mean_b, result.pairs, result.p_value
        );
    }
    Ok(())
}

fn sweep(a: &SweepArgs, command: &Command, argv: &[String]) -> Result<(), CliError> {
    let base = a.model.to_config()?;
    let spec = GridSpec {
        taus: a.taus.clone(),
        tie_tau: !a.untie_tau,
        lambdas: a.lambdas.clone(),
        ranks: a
            .ranks
            .clone()
            .unwrap_or_else(|| default_rank_grid(base.encoder.d)),
        max_parallel: a.max_parallel,
    };
    let cells = crate::trainer::grid_cells(&spec, base.loss.kind, 1)?;
    for cell in &cells {
        let mut c = cell.apply(&base);
        c.temperatures.truncate(1);
        c.validate()?;
    }
    let train_set = load_dataset(&a.train, None)?;
    let val_set = load_dataset(&a.val, Some(&train_set.types))?;
    prepare_dir(&a.out_dir)?;
    write_runspec(&a.out_dir, command, argv)?;

    let summaries = grid_search(&train_set, &val_set, &base, &spec)?;
    let mut csv =
        String::from("position,cell,temperatures,lambda,rank,score,map,evidence_f1,runspec\n");
    for (pos, s) in summaries.iter().enumerate() {
        let cell_dir = a
            .out_dir
            .join("cells")
            .join(format!("cell-{:03}", s.cell.index));
        prepare_dir(&cell_dir)?;
        let child = TrainArgs {
            train: a.train.clone(),
            val: Some(a.val.clone()),
            out_dir: cell_dir.clone(),
            model: ModelArgs::from_config(&s.config),
        };
        let mut child_argv = vec![
            "train".to_string(),
            "--train".to_string(),
            a.train.display().to_string(),
            "--val".to_string(),
            a.val.display().to_string(),
            "--out-dir".to_string(),
            cell_dir.display().to_string(),
        ];
        child_argv.extend(child.model.to_flags());
        write_runspec(&cell_dir, &Command::Train(child), &child_argv)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            pos + 1,
            s.cell.index,
            s.cell
                .temperatures
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";"),
            s.cell.lambda,
            s.cell.rank.map(|r| r.to_string()).unwrap_or_default(),
            s.score,
            s.report.all.map.map(|m| m.to_string()).unwrap_or_default(),
            s.report.all.f1,
            cell_dir.join(RUNSPEC_FILE).display()
        );
    }
    write(&a.out_dir, "sweep.csv", &csv)?;
    if let Some(best) = summaries.first() {
        println!(
            "best cell {} score {:.4} (of {})",
            best.cell.index,
            best.score,
            summaries.len()
        );
    }
    Ok(())
}

fn embed(a: &EmbedArgs, command: &Command, argv: &[String]) -> Result<(), CliError> {
    if a.limit == Some(0) {
        return Err(CliError::config("limit must be positive"));
    }
    let (model, vocab, types, _) = load_model(&a.model_dir)?;
    let mut data = load_dataset(&a.data, Some(&types))?;
    if let Some(limit) = a.limit {
        data.instances.truncate(limit);
    }
    prepare_dir(&a.out_dir)?;
    write_runspec(&a.out_dir, command, argv)?;
    let encoded = prepare(&data.instances, &vocab)?;
    let dump = embedding_dump(&model, &encoded, &types, !a.no_wrong_type)?;
    write(&a.out_dir, "embedding.tsv", dump.to_tsv())?;
    write(&a.out_dir, "embedding_meta.tsv", dump.sidecar())?;
    write(&a.out_dir, "embedding.svg", dump.to_svg())?;
    if let Some(w) = &dump.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "{} points, mean cosine positive {:.4} distractor {:.4}",
        dump.rows.len(),
        dump.mean_cos_positive,
        dump.mean_cos_distractor
    );
    Ok(())
}
