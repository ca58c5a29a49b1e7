use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vfevent::cli;
use vfevent::config::RunConfig;
use vfevent::error::Result;
use vfevent::inference::VisualMode;

#[derive(Parser)]
#[command(name = "vfevent", about = "Few-shot visually-fused event detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --override train.epochs=10
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset manifest (JSONL); overrides the config file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Global random seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Shots per class for the eval grid, e.g. --shots 5,10
    #[arg(long, value_delimiter = ',')]
    shots: Vec<usize>,
    /// Visual mode: actual, imagine, retrieve, zero, textonly or notext.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(ds) = &self.dataset {
            overrides.push(format!("dataset=\"{}\"", ds.display()));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if !self.shots.is_empty() {
            let list: Vec<String> = self.shots.iter().map(|s| s.to_string()).collect();
            overrides.push(format!("shots=[{}]", list.join(",")));
            overrides.push(format!("train.k_shots={}", self.shots[0]));
        }
        if let Some(mode) = &self.mode {
            overrides.push(format!("mode=\"{mode}\""));
            overrides.push(format!("modes=[\"{mode}\"]"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir=\"{}\"", out.display()));
        }
        overrides.extend(self.overrides.iter().cloned());
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset manifest and report every violation.
    Validate(ConfigArgs),
    /// Sample an episode, train, and write checkpoint + training log.
    Train(ConfigArgs),
    /// Synthesize an image from text using a trained checkpoint.
    Imagine {
        /// Trained checkpoint (.vfck).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Conditioning text.
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG path.
        #[arg(long, default_value = "imagined.png")]
        out: PathBuf,
    },
    /// Classify a manifest with a trained checkpoint; writes JSONL.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Visual mode: actual, imagine, retrieve, zero, textonly or notext.
        #[arg(long, default_value = "imagine")]
        mode: VisualMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "predictions.jsonl")]
        out: PathBuf,
    },
    /// Run the (shots, mode, seed) experiment grid and write results.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Optional checkpoint used to initialize every cell.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate(args) => {
            let violations = cli::cmd_validate(&args.resolve()?)?;
            Ok(if violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Train(args) => {
            cli::cmd_train(&args.resolve()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Imagine { checkpoint, text, seed, out } => {
            cli::cmd_imagine(&checkpoint, &text, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer { checkpoint, dataset, image_root, mode, seed, out } => {
            cli::cmd_infer(&checkpoint, &dataset, image_root.as_deref(), mode, seed, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, checkpoint } => {
            let ok = cli::cmd_eval(&config.resolve()?, checkpoint.as_deref())?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
