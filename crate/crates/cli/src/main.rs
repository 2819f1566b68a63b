mod chart;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "probdreamer",
    version,
    about = "Train, evaluate, and compare latent-imagination agents on predator-prey tag"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one agent from a config file.
    Train {
        /// Path to a flat `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (must not already exist).
        /// Defaults to <out-root>/<model>_seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the fixed episode suite.
    Eval {
        /// Checkpoint file; its run's config.cfg must sit next to it or one
        /// directory up.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of fixed evaluation episodes (seeds 0..episodes).
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Output directory (must not already exist).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several configs over several seeds and tabulate the results.
    Compare {
        /// Config files; an empty list yields an empty table.
        #[arg(long, num_args = 0.., value_delimiter = ',')]
        configs: Vec<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Output directory (must not already exist).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one metrics series from a run directory as SVG plus the
    /// underlying CSV slice.
    Plot {
        /// Run directory containing metrics.csv.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        what: Series,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Series {
    Losses,
    Disagreement,
    Returns,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, seed, out } => commands::train(&config, seed, out),
        Cmd::Eval { checkpoint, episodes, out } => commands::eval(&checkpoint, episodes, out),
        Cmd::Compare { configs, seeds, out } => commands::compare(&configs, &seeds, out),
        Cmd::Plot { run, what } => commands::plot(&run, what),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
