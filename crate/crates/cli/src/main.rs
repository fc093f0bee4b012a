use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsa_core::experiment::{self, Driver, Overrides, ParsedConfig};
use fedsa_core::metrics::RoundRecord;
use fedsa_core::Error;

#[derive(Parser)]
#[command(name = "fedsa", version, about = "Federated intrusion-detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress per-round progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_driver)]
        driver: Option<Driver>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the FedSA temperature/cooling grid.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_driver(s: &str) -> Result<Driver, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(path: &Path, overrides: &Overrides) -> Result<ParsedConfig, Error> {
    let parsed = experiment::load_config(path, overrides)?;
    for d in &parsed.defaults_applied {
        eprintln!("default applied: {d}");
    }
    Ok(parsed)
}

fn progress(record: &RoundRecord) {
    eprintln!(
        "round {:>4} {:<12} loss {:.5} acc {:.4}",
        record.round_index,
        format!("{:?}", record.phase).to_lowercase(),
        record.loss,
        record.accuracy
    );
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            driver,
            output,
        } => {
            let parsed = load(&config, &Overrides { seed, driver, output })?;
            let run = if cli.quiet {
                experiment::run_experiment(&parsed)?
            } else {
                experiment::run_experiment_with_progress(&parsed, &progress)?
            };
            let s = &run.summary;
            println!("run directory: {}", run.dir.display());
            if let Some(m) = &s.final_metrics {
                println!(
                    "{} rounds, final accuracy {:.4}, loss {:.5}, rounds to {:.0}%: {}",
                    s.total_aggregation_rounds,
                    m.accuracy,
                    m.loss,
                    s.target_accuracy * 100.0,
                    s.rounds_to_target.map_or("not reached".to_owned(), |r| r.to_string())
                );
            }
        }
        Command::Sweep { config, output } => {
            let parsed = load(
                &config,
                &Overrides {
                    output,
                    ..Overrides::default()
                },
            )?;
            let sweep = experiment::run_sweep(&parsed)?;
            println!("sweep directory: {}", sweep.dir.display());
            for c in &sweep.summary.cells {
                println!(
                    "t_init {:<5} alpha {:<5} mean {:.4} std {:.4}",
                    c.t_init, c.alpha, c.mean_accuracy, c.std_accuracy
                );
            }
            println!(
                "spread of means {:.4}, largest std {:.4}",
                sweep.summary.mean_spread, sweep.summary.max_std
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
