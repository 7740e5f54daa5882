use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atta_core::checkpoint::save_checkpoint;
use atta_core::dataset::{build_dataset, load_split, read_manifest, DatasetSpec, Split};
use atta_core::experiment::{run_ablate, run_eval, with_thread_cap, ExperimentConfig, RunRecord};
use atta_core::nn::Architecture;
use atta_core::ood::ScoreKind;
use atta_core::train::{train, TrainConfig};
use atta_core::Error;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "atta",
    version,
    about = "Anomaly-aware test-time adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train, clean test and corrupted test splits.
    BuildData(BuildDataArgs),
    /// Train a segmentation network and calibrate its domain-shift detector.
    Train(TrainArgs),
    /// Evaluate methods on test splits.
    Eval(EvalArgs),
    /// Run the ablation registry.
    Ablate(EvalArgs),
}

#[derive(Args)]
struct BuildDataArgs {
    /// JSON file with the same fields as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Novel-object area fraction range as `LO,HI`.
    #[arg(long, value_parser = parse_range)]
    ood_fraction_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BuildDataFile {
    out: PathBuf,
    dataset: DatasetSpec,
}

impl Default for BuildDataFile {
    fn default() -> Self {
        Self {
            out: PathBuf::from("data"),
            dataset: DatasetSpec::default(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    data: PathBuf,
    out: PathBuf,
    train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("model.json"),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate; repeat for several seeds.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Comma-separated splits (`clean`, `corrupt`).
    #[arg(long, value_delimiter = ',')]
    splits: Vec<String>,
    /// Comma-separated score kinds (`energy`, `max_logit`).
    #[arg(long, value_delimiter = ',')]
    score_kinds: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidInput(_) => EXIT_USAGE,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))
}

fn cmd_build_data(args: BuildDataArgs) -> Result<(), Failure> {
    let mut cfg: BuildDataFile = load_config(args.config.as_deref())?;
    let spec = &mut cfg.dataset;
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.n_train {
        spec.n_train = v;
    }
    if let Some(v) = args.n_test {
        spec.n_test = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.num_classes {
        spec.num_seen_classes = v;
    }
    if let Some(v) = args.ood_fraction_range {
        spec.ood_area_fraction_range = v;
    }
    let (lo, hi) = spec.ood_area_fraction_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Failure::usage(format!(
            "--ood-fraction-range must satisfy 0 < LO <= HI < 1, got {lo},{hi}"
        )));
    }
    spec.validate()?;
    let manifest = build_dataset(spec, &cfg.out)?;
    let bytes = std::fs::read(cfg.out.join(atta_core::dataset::MANIFEST_FILE)).map_err(|e| {
        Failure::from(Error::Io {
            path: cfg.out.clone(),
            source: e,
        })
    })?;
    println!(
        "wrote {} scenes to {} (manifest sha256 {})",
        manifest.entries.len(),
        cfg.out.display(),
        hex::encode(Sha256::digest(&bytes))
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg: TrainFile = load_config(args.config.as_deref())?;
    if let Some(v) = args.data {
        cfg.data = v;
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    cfg.train.validate()?;
    let manifest = read_manifest(&cfg.data)?;
    let scenes = load_split(&cfg.data, &manifest, Split::Train)?;
    let arch = Architecture {
        num_classes: manifest.spec.num_seen_classes,
        ..Architecture::default()
    };
    let outcome = with_thread_cap(|| train(&scenes, &arch, &cfg.train))??;
    save_checkpoint(&outcome.checkpoint, &cfg.out)?;
    let cal = outcome.checkpoint.calibration();
    println!("final train pixel accuracy {:.4}", outcome.train_accuracy);
    println!("domain detector a = {} b = {}", cal.a, cal.b);
    println!(
        "checkpoint {} (parameters sha256 {})",
        cfg.out.display(),
        hex::encode(Sha256::digest(outcome.checkpoint.parameter_bytes()))
    );
    Ok(())
}

fn experiment_config(args: EvalArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.data {
        cfg.data_dir = v;
    }
    if !args.checkpoints.is_empty() {
        cfg.checkpoints = args.checkpoints;
    }
    if !args.methods.is_empty() {
        cfg.methods = args.methods;
    }
    if !args.splits.is_empty() {
        cfg.splits = args
            .splits
            .iter()
            .map(|s| Split::parse(s).map_err(|e| Failure::usage(format!("--splits: {e}"))))
            .collect::<Result<_, _>>()?;
    }
    if !args.score_kinds.is_empty() {
        cfg.score_kinds = args
            .score_kinds
            .iter()
            .map(|s| ScoreKind::parse(s).map_err(|e| Failure::usage(format!("--score-kinds: {e}"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    cfg.validate()?;
    cfg.check_paths()?;
    Ok(cfg)
}

fn print_record(record: &RunRecord) {
    println!("method,split,seed,auroc,ap,fpr95,miou,macc,mean_ms_per_image");
    for r in &record.reports {
        println!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.2}",
            r.method,
            r.split.short_name(),
            r.seed,
            r.auroc,
            r.ap,
            r.fpr95,
            r.miou,
            r.macc,
            r.mean_ms_per_image
        );
    }
    println!("config hash {}", record.config_hash);
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::BuildData(args) => cmd_build_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => {
            let cfg = experiment_config(args)?;
            let record = run_eval(&cfg)?;
            print_record(&record);
            Ok(())
        }
        Command::Ablate(args) => {
            let cfg = experiment_config(args)?;
            let record = run_ablate(&cfg)?;
            print_record(&record);
            println!(
                "ablation table written to {}",
                cfg.out_dir.join("ablation.md").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
