use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use featpred_cli::render::render_filters;
use featpred_cli::report::merge_csv;
use featpred_cli::runner::{default_data_dir, run_experiment, RunOptions};
use featpred_cli::{Checkpoint, CliError, ExperimentConfig};

/// Train and evaluate networks whose weights are mostly predicted from a
/// small learned subset.
#[derive(Parser)]
#[command(name = "featpred", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, fraction) cell of an experiment config.
    Run {
        config: PathBuf,
        /// Directory holding `mnist/` and `cifar-10-batches-bin/`
        /// [default: $FEATPRED_DATA_DIR or ./data]
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `workers` from the config.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Draw the features of one layer of a checkpoint as a PGM grid.
    Render {
        checkpoint: PathBuf,
        layer: usize,
        out: PathBuf,
    },
    /// Concatenate result CSVs that share a header.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            data_dir,
            out,
            workers,
            quiet,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = RunOptions {
                data_dir: data_dir.unwrap_or_else(default_data_dir),
                output_dir: out,
                workers,
                quiet,
            };
            let summary = run_experiment(&cfg, &opts)?;
            println!("{} rows written to {}", summary.rows.len(), summary.results_csv.display());
        }
        Command::Render { checkpoint, layer, out } => {
            let cp = Checkpoint::load(&checkpoint)?;
            let f = cp.features(layer)?;
            let pgm = render_filters(&f.weights, f.shape, &out)?;
            println!("{}x{} grid of {} features written to {}", pgm.width, pgm.height, f.weights.cols(), out.display());
        }
        Command::Report { inputs, out } => {
            let paths: Vec<&std::path::Path> = inputs.iter().map(PathBuf::as_path).collect();
            match out {
                Some(p) => {
                    let mut file = std::fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
                    let n = merge_csv(&paths, &mut file)?;
                    eprintln!("{n} rows written to {}", p.display());
                }
                None => {
                    merge_csv(&paths, &mut std::io::stdout().lock())?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
