use std::io;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mwe::experiment::{best_scores, read_aggregate, run_experiment, write_best_csv, ExperimentSpec, RunOptions};

#[derive(Parser)]
#[command(name = "mwe", version, about = "Multi-subject sparse source estimation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark sweep described by a JSON spec.
    Run {
        spec: PathBuf,
        /// Overrides `output_dir` from the experiment file.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Reuse finished cells from an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Print the best grid point per model and subject count as CSV.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Auc)]
        metric: MetricArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Auc,
    Emd,
    Mse,
}

impl MetricArg {
    fn name(self) -> &'static str {
        match self {
            MetricArg::Auc => "auc",
            MetricArg::Emd => "emd",
            MetricArg::Mse => "mse",
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            spec,
            output_dir,
            threads,
            resume,
        } => {
            if let Some(t) = threads {
                if t == 0 {
                    bail!("--threads must be at least 1");
                }
                rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
            }
            let spec = ExperimentSpec::load(&spec).with_context(|| format!("reading {}", spec.display()))?;
            if output_dir.is_none() && spec.output_dir.is_none() {
                bail!("no output directory: pass --output-dir or set output_dir in the experiment file");
            }
            let report = run_experiment(&spec, &RunOptions { output_dir, resume })?;
            let m = &report.manifest;
            log::info!(
                "{} cells ({} computed, {} resumed, {} errors) in {:.1} s",
                m.cells,
                m.computed,
                m.resumed,
                m.errors,
                m.elapsed_s
            );
        }
        Command::Report { dir, metric } => {
            let path = dir.join("aggregate.csv");
            let rows = read_aggregate(&path).with_context(|| format!("reading {}", path.display()))?;
            write_best_csv(io::stdout().lock(), &best_scores(&rows, metric.name())?)?;
        }
    }
    Ok(())
}
