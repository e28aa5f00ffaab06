use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use embref::fixtures::{generate_dataset, DatasetReader, GeneratorConfig, Split, SplitSizes};
use embref::model::Ablation;
use embref::runner::checkpoint::load_checkpoint;
use embref::runner::eval::{evaluate_checkpoint, write_report};
use embref::runner::oracle::{format_report, run_suite};
use embref::runner::train::train;
use embref::runner::visualize::visualize;
use embref::runner::{RunConfig, OUTPUT_ROOT_ENV};
use embref::{Error, Result};

const USAGE: u8 = 1;
const GATE_FAILED: u8 = 2;

#[derive(Parser)]
#[command(name = "embref", version, about = "Embodied reference grounding on synthetic scenes")]
struct Cli {
    /// Output root; defaults to $EMBREF_OUT, then ./runs.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write Prec@X reports.
    Eval(EvalArgs),
    /// Render attention panels for selected samples.
    Visualize(VisualizeArgs),
    /// Run brute-force oracle checks; exits with 2 on any failure.
    Oracle {
        /// Suite name or `all`.
        #[arg(default_value = "all")]
        suite: String,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset directory; defaults to `<root>/dataset`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value_t = SplitSizes::CI.train)]
    train: usize,
    #[arg(long, default_value_t = SplitSizes::CI.test)]
    test: usize,
    /// Use the 2970 / 1251 split sizes.
    #[arg(long, conflicts_with_all = ["train", "test"])]
    paper_sizes: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; defaults to `<root>/dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory; defaults to `<root>/train`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size configuration instead of the desk-scale one.
    #[arg(long)]
    paper_config: bool,
    /// Override a config field, e.g. `--set lr=5e-4` or `--set loss_weights.div=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for the ablation ladder level (0 = baseline, 5 = full).
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
    ablation_level: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the checkpoint in the run directory if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report directory; defaults to `<root>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sample ids, comma separated or repeated.
    #[arg(long = "sample", value_delimiter = ',', required = true)]
    samples: Vec<String>,
    /// Image directory; defaults to `<root>/visualize`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write embodied-coordinate and body-attention images.
    #[arg(long)]
    extras: bool,
}

fn output_root(cli_root: Option<PathBuf>) -> PathBuf {
    cli_root
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Sets `key` (dotted path) in a JSON object. Values parse as JSON when they
/// can and are taken as strings otherwise.
fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

fn build_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let base = if args.paper_config { RunConfig::paper() } else { RunConfig::ci() };
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)?;
        let Value::Object(fields) = file else {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        };
        for (k, v) in fields {
            value[k.as_str()] = v;
        }
    }
    for o in &args.overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(level) = args.ablation_level {
        cfg.ablation = Ablation::level(level as usize);
    }
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.total_epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_dir(arg: &Option<PathBuf>, root: &Path) -> PathBuf {
    arg.clone().unwrap_or_else(|| root.join("dataset"))
}

fn run(cli: Cli) -> Result<u8> {
    let root = output_root(cli.root);
    match cli.command {
        Command::Generate(a) => {
            let out = a.out.unwrap_or_else(|| root.join("dataset"));
            let sizes = if a.paper_sizes {
                SplitSizes::PAPER
            } else {
                SplitSizes { train: a.train, test: a.test }
            };
            let cfg = GeneratorConfig::default().with_image_size(a.image_size);
            let manifest = generate_dataset(&out, &cfg, sizes, a.seed)?;
            println!(
                "wrote {} train and {} test samples to {}",
                manifest.len(Split::Train),
                manifest.len(Split::Test),
                out.display()
            );
        }
        Command::Train(a) => {
            let cfg = build_run_config(&a)?;
            let dataset = dataset_dir(&a.dataset, &root);
            let out = a.out.clone().unwrap_or_else(|| root.join("train"));
            let outcome = train(&cfg, &dataset, &out, a.resume)?;
            if let Some(last) = outcome.history.last() {
                println!("epoch {} total loss {:.4}", last.epoch, last.mean.total);
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics: {}", outcome.metrics.display());
        }
        Command::Eval(a) => {
            let split: Split = a.split.parse()?;
            let report = evaluate_checkpoint(&a.checkpoint, &dataset_dir(&a.dataset, &root), split)?;
            let out = a.out.unwrap_or_else(|| root.join("eval"));
            write_report(&report, &out)?;
            print!("{}", report.to_table());
        }
        Command::Visualize(a) => {
            let state = load_checkpoint(&a.checkpoint)?;
            let reader = DatasetReader::open(&dataset_dir(&a.dataset, &root))?;
            let out = a.out.unwrap_or_else(|| root.join("visualize"));
            for path in visualize(&state.model, &reader, &a.samples, &out, a.extras)? {
                println!("{}", path.display());
            }
        }
        Command::Oracle { suite } => {
            let checks = run_suite(&suite)?;
            print!("{}", format_report(&checks));
            if checks.iter().any(|c| !c.passed) {
                return Ok(GATE_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(USAGE)
        }
    }
}
