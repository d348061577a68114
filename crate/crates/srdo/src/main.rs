use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srdo::cli::{self, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_VERIFY};
use srdo::config::parse_config;

#[derive(Parser)]
#[command(
    name = "srdo",
    about = "Straggler-robust distributed optimization simulator"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over its seed sweep.
    Run {
        /// Path to the TOML run configuration.
        config: PathBuf,
        /// Run gradient computation scenarios 1-3 on shared realizations and
        /// emit the ordering report.
        #[arg(long)]
        sweep_scenarios: bool,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the configured parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run with every bound checker enabled; nonzero exit on any violation.
    Verify {
        config: PathBuf,
        /// Zero one encode coefficient before verifying (self-test).
        #[arg(long)]
        corrupt_scheme: bool,
    },
    /// Print the coding scheme for one partition size.
    Scheme {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        s: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf) -> Result<srdo::config::RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Run {
            config,
            sweep_scenarios,
            output,
            jobs,
        } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            if let Some(j) = jobs {
                cfg.jobs = j.max(1);
            }
            let out_dir = output.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            if sweep_scenarios {
                match cli::run_scenario_sweep(&cfg, &out_dir) {
                    Ok(report) => {
                        println!(
                            "mean final AE: scenario1 {:.6e}, scenario2 {:.6e}, scenario3 {:.6e}",
                            report.mean_ae[0], report.mean_ae[1], report.mean_ae[2]
                        );
                        println!(
                            "ordering AE1 <= AE3 <= AE2: {}",
                            if report.ordering_holds {
                                "holds"
                            } else {
                                "violated"
                            }
                        );
                        EXIT_OK
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        EXIT_CONFIG
                    }
                }
            } else {
                match cli::run_experiment(&cfg, &out_dir) {
                    Ok(outcome) => {
                        for trace in &outcome.traces {
                            println!(
                                "seed {}: {} ({} iterations, final AE {:.6e})",
                                trace.seed,
                                trace.status.label(),
                                trace.records.len(),
                                trace.final_ae().unwrap_or(f64::NAN)
                            );
                        }
                        if outcome.diverged {
                            EXIT_DIVERGED
                        } else {
                            EXIT_OK
                        }
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        EXIT_CONFIG
                    }
                }
            }
        }
        Command::Verify {
            config,
            corrupt_scheme,
        } => match load_config(&config) {
            Ok(cfg) => match cli::verify_bounds(&cfg, corrupt_scheme) {
                Ok(outcome) => {
                    print!("{}", outcome.report);
                    if outcome.hard_failures.is_empty() {
                        println!("verification passed");
                        EXIT_OK
                    } else {
                        for f in &outcome.hard_failures {
                            eprintln!("FAIL: {f}");
                        }
                        EXIT_VERIFY
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_CONFIG
                }
            },
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        Command::Scheme { n, s, seed } => match cli::scheme_report(n, s, seed) {
            Ok(text) => {
                print!("{text}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
    };
    ExitCode::from(code as u8)
}
