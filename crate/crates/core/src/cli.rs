//! The `bnn` command line.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::binarize::BinaryAlphabet;
use crate::data::{encode_features, load_features, load_frames, load_idx, write_frames, Dataset, SyntheticFrames};
use crate::error::BnnError;
use crate::gradcheck::run_suite;
use crate::model_io::{load_model, save_model, Model};
use crate::network::{BinaryMode, BinaryScheme, Network, NetworkConfig};
use crate::packed::bench;
use crate::trainer::{evaluate, train, write_csv_log, EpochReport, TrainOptions};

/// Failure of one invocation.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations; exit code 2.
    Usage(String),
    /// Anything that went wrong while running; exit code 1.
    Run(BnnError),
}

impl From<BnnError> for CliError {
    fn from(e: BnnError) -> Self {
        CliError::Run(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }

    /// One-line message starting with `error:`.
    pub fn message(&self) -> String {
        let text = match self {
            CliError::Usage(m) => format!("usage: {m}"),
            CliError::Run(e) => e.to_string(),
        };
        format!("error: {}", text.replace('\n', " "))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "bnn", version, about = "Train, pack and run binary neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a real-valued sigmoid network.
    TrainBaseline(TrainBaselineArgs),
    /// Fine-tune a binary network from a baseline model.
    Train(TrainArgs),
    /// Print accuracy and mean cross-entropy on a dataset.
    Eval(EvalArgs),
    /// Re-encode a model with binary-weight layers packed to one bit per weight.
    Pack(PackArgs),
    /// Write class posteriors for a feature file.
    Infer(InferArgs),
    /// Time the reference and packed kernels; CSV on stdout.
    Bench(BenchArgs),
    /// Check backprop against finite differences on random networks.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic frame-classification dataset.
    GenData(GenDataArgs),
}

/// A labelled dataset: frame files or IDX files.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// FRM1 feature file.
    #[arg(long, requires = "labels")]
    pub features: Option<PathBuf>,
    /// LBL1 label file.
    #[arg(long, requires = "features")]
    pub labels: Option<PathBuf>,
    /// IDX image file (0x803).
    #[arg(long, requires = "idx_labels", conflicts_with = "features")]
    pub idx_images: Option<PathBuf>,
    /// IDX label file (0x801).
    #[arg(long, requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    /// Frames of context to splice around each frame (odd).
    #[arg(long, default_value_t = 1)]
    pub splice: usize,
}

impl DataArgs {
    fn load(&self) -> CliResult<Dataset> {
        let d = match (&self.features, &self.labels, &self.idx_images, &self.idx_labels) {
            (Some(f), Some(l), None, None) => load_frames(f, l)?,
            (None, None, Some(i), Some(l)) => load_idx(i, l)?,
            _ => return usage("give a dataset with --features/--labels or --idx-images/--idx-labels"),
        };
        if self.splice == 1 {
            Ok(d)
        } else {
            Ok(d.splice(self.splice)?)
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct TrainDataArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Holdout FRM1 features; without it the tail of the training set is held out.
    #[arg(long, requires = "holdout_labels")]
    pub holdout_features: Option<PathBuf>,
    #[arg(long, requires = "holdout_features")]
    pub holdout_labels: Option<PathBuf>,
    /// Fraction of the training set held out when no holdout files are given.
    #[arg(long, default_value_t = 0.1)]
    pub holdout_fraction: f64,
}

impl TrainDataArgs {
    fn load(&self) -> CliResult<(Dataset, Dataset)> {
        let all = self.data.load()?;
        match (&self.holdout_features, &self.holdout_labels) {
            (Some(f), Some(l)) => {
                let mut h = load_frames(f, l)?;
                if self.data.splice != 1 {
                    h = h.splice(self.data.splice)?;
                }
                Ok((all, h))
            }
            _ => {
                if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
                    return usage("--holdout-fraction must lie in (0, 1)");
                }
                Ok(all.split_holdout(self.holdout_fraction))
            }
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    /// Network config file (dims/activations/weight_modes/policies).
    #[arg(long, conflicts_with = "dims")]
    pub config: Option<PathBuf>,
    /// Comma-separated layer widths for a sigmoid network with softmax output.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.008)]
    pub lr: f32,
    #[command(flatten)]
    pub data: TrainDataArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Bw,
    Ba,
    Bnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlphabetArg {
    Signed,
    Unsigned,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Baseline model to start from.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Mask threshold for binary activations (default 1).
    #[arg(long)]
    pub k: Option<f32>,
    /// Per-step probability of a semi-stochastic rounding pass.
    #[arg(long, default_value_t = 0.0)]
    pub p: f64,
    /// Gradient-norm threshold for full-binary training (default 15, 0 disables).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f32,
    #[arg(long, value_enum, default_value_t = AlphabetArg::Signed)]
    pub alphabet: AlphabetArg,
    /// Keep the first layer fixed.
    #[arg(long)]
    pub fix_input: bool,
    /// Keep the softmax layer fixed.
    #[arg(long)]
    pub fix_softmax: bool,
    /// Clip gradient norms even when the network is not fully binary.
    #[arg(long)]
    pub force_grad_clip: bool,
    /// Also clip real-mode weights into [-1, 1] after each update.
    #[arg(long)]
    pub clip_real_weights: bool,
    #[command(flatten)]
    pub data: TrainDataArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// FRM1 feature file.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub splice: usize,
    /// Write posteriors as an FRM1 file instead of CSV on stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    pub rows: usize,
    #[arg(long, default_value_t = 1024)]
    pub cols: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub frames: usize,
    #[arg(long, default_value_t = 24)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 2.0)]
    pub noise: f32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command, writing
/// results to `out`. Parse failures map to [`CliError::Usage`] except for
/// `--help`/`--version`, which are printed and succeed.
pub fn run_with_args<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return usage(first.trim_start_matches("error: "));
        }
    };
    run(cli.command, out)
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run_with_args(std::env::args_os(), &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::TrainBaseline(a) => cmd_train_baseline(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Pack(a) => cmd_pack(a),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn run_training(mut net: Network, mut opts: TrainOptions, data: &TrainDataArgs, run: &RunArgs) -> CliResult<()> {
    if let Some(e) = run.epochs {
        opts.max_epochs = e;
    }
    if let Some(b) = run.batch_size {
        opts.batch_size = b;
    }
    opts.seed = run.seed;
    let (train_set, holdout) = data.load()?;
    let quiet = run.quiet;
    let reports = train(&mut net, &train_set, &holdout, &opts, |r: &EpochReport| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train {:.4}  holdout {:.4}  acc {:.4}  lr {}",
                r.epoch, r.train_loss, r.holdout_loss, r.holdout_acc, r.lr
            );
        }
    })?;
    save_model(&Model::Float(net), &run.out)?;
    if let Some(log) = &run.log {
        let mut buf = Vec::new();
        write_csv_log(&reports, &mut buf)?;
        fs::write(log, buf)?;
    }
    Ok(())
}

fn cmd_train_baseline(a: TrainBaselineArgs) -> CliResult<()> {
    let config = match (&a.config, &a.dims) {
        (Some(path), None) => NetworkConfig::parse(&fs::read_to_string(path)?)?,
        (None, Some(dims)) => NetworkConfig::sigmoid_mlp(dims)?,
        _ => return usage("give the network with --config or --dims"),
    };
    if config
        .layers
        .iter()
        .any(|l| l.weight_mode.is_binary() || l.activation.is_binary())
    {
        return usage("train-baseline trains real networks; use `train` for binary modes");
    }
    let opts = TrainOptions {
        initial_lr: a.lr,
        ..TrainOptions::baseline()
    };
    let net = Network::init_random(&config, a.run.seed)?;
    run_training(net, opts, &a.data, &a.run)
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    if a.k.is_some() && a.mode == ModeArg::Bw {
        return usage("--k applies to binary activations; mode bw has none");
    }
    if a.alpha.is_some() && a.mode != ModeArg::Bnn && !a.force_grad_clip {
        return usage("--alpha applies to mode bnn (or with --force-grad-clip)");
    }
    let base = load_model(&a.init)?.into_network()?;
    let scheme = BinaryScheme {
        mode: match a.mode {
            ModeArg::Bw => BinaryMode::Weights,
            ModeArg::Ba => BinaryMode::Activations,
            ModeArg::Bnn => BinaryMode::Both,
        },
        alphabet: match a.alphabet {
            AlphabetArg::Signed => BinaryAlphabet::Signed,
            AlphabetArg::Unsigned => BinaryAlphabet::Unsigned,
        },
        fix_input: a.fix_input,
        fix_softmax: a.fix_softmax,
    };
    let target = scheme.target_config(&base.config())?;
    let net = base.derive_binary_config(&target)?;
    let defaults = TrainOptions::binary();
    let opts = TrainOptions {
        initial_lr: a.lr,
        k: a.k.unwrap_or(defaults.k),
        p: a.p,
        alpha: a.alpha.unwrap_or(defaults.alpha),
        force_grad_clip: a.force_grad_clip,
        clip_real_weights: a.clip_real_weights,
        ..defaults
    };
    run_training(net, opts, &a.data, &a.run)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let data = a.data.load()?;
    let eval = match &model {
        Model::Float(net) => evaluate(net, &data)?,
        // same argmax and posteriors as the unpacked twin
        Model::Packed(p) => evaluate(&p.to_network()?, &data)?,
    };
    writeln!(out, "acc={:.6} xent={:.6}", eval.accuracy, eval.mean_loss)?;
    Ok(())
}

fn cmd_pack(a: PackArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    save_model(&Model::Packed(model.to_packed()), &a.out)?;
    Ok(())
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let (dim, values) = load_features(&a.features)?;
    let (dim, values) = if a.splice == 1 {
        (dim, values)
    } else {
        let n = values.len() / dim.max(1);
        let d = Dataset::new(dim, 1, values, vec![0; n])?.splice(a.splice)?;
        (d.dim(), d.features().to_vec())
    };
    if dim != model.input_dim() {
        return Err(BnnError::Config(format!("features have dim {dim}, model expects {}", model.input_dim())).into());
    }
    let packed = model.to_packed();
    let mut posteriors = Vec::with_capacity(values.len() / dim.max(1) * model.output_dim());
    for x in values.chunks(dim.max(1)) {
        posteriors.extend_from_slice(&packed.infer(x)?);
    }
    match &a.out {
        Some(path) => fs::write(path, encode_features(model.output_dim(), &posteriors))?,
        None => {
            for row in posteriors.chunks(model.output_dim()) {
                let best = crate::tensor::argmax(row);
                let probs: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
                writeln!(out, "{best},{}", probs.join(","))?;
            }
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let rows = bench(a.rows, a.cols, a.reps, a.seed)?;
    writeln!(out, "{}", crate::packed::BenchRow::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.seeds == 0 {
        return usage("--seeds must be >= 1");
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let report = run_suite(&seeds)?;
    writeln!(out, "kind,params,max_rel_error")?;
    for k in &report.kinds {
        writeln!(out, "{},{},{:.3e}", k.kind, k.params, k.max_rel_error)?;
    }
    if !report.passed(a.tolerance) {
        return Err(BnnError::Internal(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            report.max_rel_error(),
            a.tolerance
        ))
        .into());
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult<()> {
    let task = SyntheticFrames {
        frames: a.frames,
        dim: a.dim,
        classes: a.classes,
        noise: a.noise,
        seed: a.seed,
        ..SyntheticFrames::default()
    };
    write_frames(&task.generate()?, &a.features, &a.labels)?;
    Ok(())
}
