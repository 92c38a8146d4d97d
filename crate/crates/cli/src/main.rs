mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "siv",
    version,
    about = "Single-image and single-video GAN training, sampling and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on an image file or a directory of video frames.
    Train {
        /// TOML run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides training.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint. Its stored setup replaces the model and training keys.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write samples from a checkpoint as sample_00000.png, sample_00001.png, ...
    Generate {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report for a checkpoint or a directory of generated images.
    Evaluate {
        /// Checkpoint file, or directory of generated images.
        input: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `toy` or `files:<weights>`; overrides evaluation.plugins.
        #[arg(long)]
        plugins: Option<String>,
        /// Samples drawn from a checkpoint; overrides evaluation.n_generated.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving metrics.json and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a checkpoint or echo a configuration file in canonical form.
    /// Without a path, prints the default configuration.
    Inspect { path: Option<PathBuf> },
}

fn main() -> ExitCode {
    let help = format!(
        "{}\nLoader threads for frame directories: {}",
        siv_core::config::keys_help(),
        siv_core::data::WORKERS_ENV
    );
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommand("train", |c| c.after_help(help))
        .get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::Train {
            config,
            source,
            out,
            seed,
            resume,
        } => commands::train(config.as_deref(), &source, &out, seed, resume.as_deref()),
        Command::Generate {
            checkpoint,
            n,
            seed,
            out,
        } => commands::generate(&checkpoint, n, seed, &out),
        Command::Evaluate {
            input,
            source,
            config,
            plugins,
            n,
            seed,
            out,
        } => commands::evaluate(
            &input,
            &source,
            config.as_deref(),
            plugins.as_deref(),
            n,
            seed,
            &out,
        ),
        Command::Inspect { path } => commands::inspect(path.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("siv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
