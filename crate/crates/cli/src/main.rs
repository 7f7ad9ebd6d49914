//! `gridfill`: synthetic datasets, joint multi-view inpainting, radiance
//! field training with dataset updates, rendering and evaluation.

mod backend;
mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gridfill", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic room dataset with ground truth.
    MakeSynthetic(commands::MakeSyntheticArgs),
    /// Inpaint the unknown pixels of a dataset jointly in grids.
    InpaintJoint(commands::InpaintArgs),
    /// Train a radiance field with dataset updates.
    Train(commands::TrainArgs),
    /// Render a field along an orbit path.
    Render(commands::RenderArgs),
    /// Evaluate a field against a dataset.
    Eval(commands::EvalArgs),
    /// Serve the conformance stub over the wire protocol.
    ServeStub(commands::ServeStubArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let g = &cli.global;
    match cli.command {
        Command::MakeSynthetic(a) => commands::make_synthetic(g, a),
        Command::InpaintJoint(a) => commands::inpaint_joint(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Render(a) => commands::render(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::ServeStub(a) => commands::serve_stub(g, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
