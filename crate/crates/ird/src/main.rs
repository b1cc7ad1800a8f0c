use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ird::commands::{self, Console};
use ird::config::RunConfig;
use ird::CliError;

#[derive(Debug, Parser)]
#[command(name = "ird", version, about = "Illumination-reflectance-depth decoupling on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scene and initialization seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ird-out")]
    out: PathBuf,
    /// Suppress progress and summaries on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes with planted ground truth.
    Synth {
        /// Number of scenes; overrides `synth.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Jointly optimize depth, pose, reflectance and light.
    Fit {
        /// Scene directory; without it the configured scene is rendered.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Depth metrics of a checkpoint against a scene's ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference audit of every routed loss gradient.
    Gradcheck,
    /// Export the decomposition of a checkpoint on a scene.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    cfg.validate()?;
    let console = Console { quiet: cli.quiet };
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth { count } => commands::synth(&cfg, count.unwrap_or(cfg.synth.count), out, console).map(drop),
        Command::Fit { data } => commands::fit(&cfg, data.as_deref(), out, console).map(drop),
        Command::Eval { checkpoint, data } => commands::eval(&cfg, &checkpoint, &data, out, console).map(drop),
        Command::Gradcheck => commands::gradcheck(&cfg, out, console).map(drop),
        Command::Render { checkpoint, data } => commands::render(&cfg, &checkpoint, &data, out, console).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ird::EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
