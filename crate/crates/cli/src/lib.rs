//! Command-line front end: preprocess, train, generate, evaluate, bench.

pub mod bench;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod generate;
pub mod plot;
pub mod preprocess;
pub mod train;
pub mod util;

pub use error::{CliError, Result};

#[derive(Debug, clap::Parser)]
#[command(name = "gestor", version, about = "Speech-driven gesture synthesis with AdaLN Mamba-2 diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Subcommand)]
pub enum Command {
    /// Pair BVH/WAV recordings, featurize and cut them into a clip store.
    Preprocess(preprocess::PreprocessArgs),
    /// Train the denoiser on a clip store.
    Train(train::TrainArgs),
    /// Sample gestures for a speech recording.
    Generate(generate::GenerateArgs),
    /// Score generated motion against a reference set.
    Evaluate(evaluate::EvaluateArgs),
    /// Time and size the linear, quadratic and attention stacks.
    Bench(bench::BenchArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    util::init_threads()?;
    match &cli.command {
        Command::Preprocess(a) => preprocess::run(a).map(drop),
        Command::Train(a) => train::run(a).map(drop),
        Command::Generate(a) => generate::run(a).map(drop),
        Command::Evaluate(a) => evaluate::run(a).map(drop),
        Command::Bench(a) => bench::run(a).map(drop),
    }
}
