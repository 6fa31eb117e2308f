mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Data(anyhow::Error),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "graphspy", version, about = "Predict which MiniASM procedures contain dead stores")]
pub struct Cli {
    /// key=value file of flag defaults; flags on the command line win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for generation, label runs and training
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Single-threaded numerics (the default; kept for run manifests)
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labelled datasets, one directory per configuration tag
    Generate(GenerateArgs),
    /// Run the oracle on a program and print procedure -> 0/1
    Label(LabelArgs),
    /// Print the graphs and token inputs of every procedure as JSON lines
    Featurize(FeaturizeArgs),
    /// Train a model on one dataset directory and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split file
    Evaluate(EvaluateArgs),
    /// Print per-procedure dead-store probabilities for a program
    Predict(PredictArgs),
    /// Train and compare model variants across configuration tags
    Report(ReportArgs),
    /// Run the gradient checks and the oracle-equivalence suite
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output root; each tag gets <out>/<tag>/{train,val,test}.jsonl.gz
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Samples (procedures) per configuration
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
    /// Comma-separated configuration tags
    #[arg(long, default_value = "A-Opt0,A-Opt1,B-Opt0,B-Opt1")]
    pub configs: String,
    /// Train,val,test fractions summing to 1
    #[arg(long, default_value = "0.4,0.3,0.3")]
    pub ratios: String,
    /// Also write the Hybrid mix of all generated configurations
    #[arg(long)]
    pub hybrid: bool,
    /// Chance that a procedure receives an injected dead store
    #[arg(long)]
    pub dead_store_injection: Option<f64>,
    /// Chance that a procedure gets a second call site
    #[arg(long)]
    pub call_density: Option<f64>,
    /// Chance that a region becomes a loop
    #[arg(long)]
    pub loop_probability: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProgramArgs {
    /// MiniASM source file
    #[arg(long, value_name = "FILE")]
    pub program: PathBuf,
    /// Source dialect, A or B
    #[arg(long, default_value = "A")]
    pub dialect: String,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    pub source: ProgramArgs,
    /// Runs on independent random inputs; a procedure is 1 if any run finds a dead store in it
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Step budget per run
    #[arg(long, default_value_t = graphspy_core::corpus::MAX_STEPS)]
    pub max_steps: u64,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub source: ProgramArgs,
    /// Write JSON lines here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    /// Model variant: w2v, cnn, w2v+ggnn, w2v+ggnn+resnet or full
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Minibatch size
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Maximum training epochs
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Keep the pretrained embedding tables fixed
    #[arg(long)]
    pub freeze_embeddings: bool,
    /// Skip-gram pretraining epochs
    #[arg(long, default_value_t = 5)]
    pub w2v_epochs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding train/val splits and manifest.json
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint path
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by train
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Split file (.jsonl.gz)
    #[arg(long, value_name = "FILE")]
    pub split: PathBuf,
    /// Also write the metrics JSON here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Print a table instead of JSON
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by train
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub source: ProgramArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Dataset root written by generate
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Comma-separated tags; defaults to every dataset under --data
    #[arg(long)]
    pub configs: Option<String>,
    /// Comma-separated model variants
    #[arg(long, default_value = "w2v,w2v+ggnn,w2v+ggnn+resnet,full")]
    pub variants: String,
    /// Also write the report JSON here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Print a table instead of JSON
    #[arg(long)]
    pub table: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Random traces for the oracle-equivalence sweep
    #[arg(long, default_value_t = 1000)]
    pub traces: usize,
    /// Also check the labelling trace of every program in this dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

fn parse(args: Vec<OsString>) -> Result<Cli, CliError> {
    let usage = |e: clap::Error| CliError::Usage(e.to_string());
    let root = Cli::command();
    // required flags may come from the config file, so the first look is lenient
    let loose = root.clone().ignore_errors(true).try_get_matches_from(&args).map_err(usage)?;
    let sub = loose.subcommand();
    let path = sub
        .and_then(|(_, m)| m.get_one::<PathBuf>("config"))
        .or_else(|| loose.get_one::<PathBuf>("config"))
        .cloned();
    let mut all = args;
    if let (Some(path), Some((name, sub))) = (path, sub) {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let values = config::parse_config(&text)?;
        all.extend(config::file_arguments(&root, name, sub, &values, &path)?);
    }
    let matches = root.try_get_matches_from(all).map_err(usage)?;
    Cli::from_arg_matches(&matches).map_err(usage)
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::command().try_get_matches_from(&args) {
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        _ => parse(args),
    };
    match cli.and_then(commands::run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_argument_has_help() {
        let root = Cli::command();
        root.clone().debug_assert();
        for sub in root.get_subcommands() {
            for arg in sub.get_arguments().chain(root.get_arguments()) {
                assert!(arg.get_help().is_some(), "{} --{}", sub.get_name(), arg.get_id());
            }
        }
    }
}
