use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hetfed::config::ExperimentConfig;
use hetfed::report::{collect_rows, load_summary, long_csv, render_table, write_atomic};
use hetfed::runner::{self, SweepAxis};
use hetfed::Result;

/// Model-heterogeneous federated learning simulator.
#[derive(Parser)]
#[command(name = "hetfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured strategy and write CSV/JSON outputs.
    Run { config: PathBuf },
    /// One run per axis value with shared seeds; writes a merged CSV.
    Sweep {
        config: PathBuf,
        /// num_clients, alpha or scenario.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `0.5,5` or `memory,communication+memory`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print the model pool of every arm as CSV.
    Pool { config: PathBuf },
    /// Print per-client class counts as CSV.
    Partition { config: PathBuf },
    /// Summarise runs given their summary.json / manifest.json / output dirs.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Also write the long-format CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (result, _) = runner::run(&cfg)?;
            let summary = runner::summarize(&cfg, &result);
            let rows = collect_rows(&[(cfg.output.dir.display().to_string(), summary)]);
            print!("{}", render_table(&rows));
            println!("outputs written to {}", cfg.output.dir.display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", runner::sweep(&cfg, axis, &values)?);
        }
        Command::Pool { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", runner::pool_table(&cfg)?);
        }
        Command::Partition { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", runner::partition_table(&cfg)?);
        }
        Command::Report { paths, csv } => {
            let summaries = paths
                .iter()
                .map(|p| Ok((p.display().to_string(), load_summary(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let rows = collect_rows(&summaries);
            print!("{}", render_table(&rows));
            if let Some(path) = csv {
                write_atomic(&path, long_csv(&rows).as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
