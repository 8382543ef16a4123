//! `procdiff` command-line driver.
//!
//! Exit codes: 0 ok, 1 IO or malformed input, 2 empty corpus, 3 numeric
//! failure, 4 configuration or scenario mismatch, 5 incomplete inputs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use procdiff::Error;

#[derive(Debug, Parser)]
#[command(name = "procdiff", version, about = "Memory-conditioned procedural image generation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Layering: defaults < `--config` <
/// `--toy` < subcommand flags < `--set` < `PROCDIFF_*` variables.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Desk-scale preset: narrow memory, larger learning rate, strided sampling.
    #[arg(long, global = true)]
    pub toy: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; every output and the run record go here.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a manifest and keyframe tree from annotations and extracted frames.
    Preprocess(commands::PreprocessArgs),
    /// Train the diffusion model on a manifest split.
    Train(commands::TrainArgs),
    /// Generate every step of the selected recipes from a checkpoint.
    Generate(commands::GenerateArgs),
    /// Score a generated tree against the manifest keyframes.
    Evaluate(commands::EvaluateArgs),
    /// Print the prompt sequences a scenario produces, without a model.
    SimulateScenario(commands::SimulateArgs),
    /// Edit one recipe's step texts and regenerate it.
    Manipulate(commands::ManipulateArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } | Error::Json(_) => 1,
        Error::Integrity(_) | Error::Referential(_) => 1,
        Error::EmptyCorpus => 2,
        Error::Numeric(_) | Error::Tensor(_) => 3,
        Error::Config(_) | Error::Validation(_) | Error::Coverage { .. } | Error::Edit { .. } => 4,
        Error::NoFrame { .. } => 4,
        Error::Incomplete(_) | Error::UndefinedMetric(_) | Error::EmptyMetric(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Generate(a) => commands::generate(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::SimulateScenario(a) => commands::simulate(g, a),
        Command::Manipulate(a) => commands::manipulate(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
