//! `contseg`: generate phantom data, train the continual trajectory stage by
//! stage, evaluate checkpoints and tabulate costs.
//!
//! Exit codes: 0 on success, 2 on configuration or usage errors, 3 on
//! runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contseg::experiment::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "contseg", version, about = "Class-incremental segmentation experiments on synthetic phantoms")]
struct Cli {
    /// Experiment config (JSON). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from a named preset instead of the defaults: three-stage or two-stage.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,

    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the staged phantom dataset under <output>/data.
    GenData {
        /// Replace an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Write the class embedding table, or validate an existing file.
    Embed {
        /// Validate this embedding file against the plan's class names instead of writing one.
        #[arg(long)]
        validate: Option<PathBuf>,
    },
    /// Train one stage of the trajectory.
    Train {
        #[arg(long)]
        stage: usize,
        /// Checkpoint of the previous stage (required for stage > 1).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out set and write Dice reports next to it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Itemize the model's FLOPs and write growth curves for every strategy.
    Flops {
        /// Add rows computed from the published 3D constants.
        #[arg(long)]
        paper_constants: bool,
    },
    /// Merge every evaluated checkpoint into one table and plot.
    Report,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    Ok(match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(UsageError("no subcommand given (see --help)".into()).into());
    };
    match command {
        Command::GenData { force } => commands::gen_data(&cfg, force),
        Command::Embed { validate } => commands::embed(&cfg, validate.as_deref()),
        Command::Train { stage, from } => commands::train(&cfg, stage, from.as_deref()),
        Command::Eval { checkpoint, out } => commands::eval(&cfg, &checkpoint, out.as_deref()),
        Command::Flops { paper_constants } => commands::flops(&cfg, paper_constants),
        Command::Report => commands::report(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<contseg::Error>() {
            return if e.is_config() { 2 } else { 3 };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
