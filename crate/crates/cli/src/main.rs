use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epose_cli::{commands, Result, RunConfig};

#[derive(Parser)]
#[command(name = "epose", version, about = "Equivariant camera pose regression experiments")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set group=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic planar dataset.
    SynthGen,
    /// Train a pose regressor.
    Train,
    /// Evaluate a checkpoint on a dataset split.
    Eval,
    /// Measure equivariance of the configured backbone.
    VerifyEquiv,
    /// Train and evaluate one model per group order.
    Sweep,
    /// Convert 7-Scenes pose files into the dataset layout.
    #[command(name = "convert-7scenes")]
    Convert7scenes { src: PathBuf, dst: PathBuf },
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed, cli.out.as_deref())?;
    match &cli.command {
        Command::SynthGen => commands::synth_gen(&cfg).map(drop),
        Command::Train => commands::train(&cfg).map(drop),
        Command::Eval => commands::eval(&cfg).map(drop),
        Command::VerifyEquiv => commands::verify_equiv(&cfg).map(drop),
        Command::Sweep => commands::sweep(&cfg).map(drop),
        Command::Convert7scenes { src, dst } => commands::convert_7scenes(src, dst).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
