use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtcsim::config::{self, ConfigError};
use mtcsim::experiment::{self, ExperimentError};
use mtcsim::workloads::{write_workload, WorkloadSpec};

/// Many-task computing middleware simulator.
#[derive(Parser)]
#[command(name = "mtcsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every seed of an experiment config.
    Run { config: PathBuf },
    /// Run several configs on the same workload and print deltas.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
    },
    /// Parse and validate a config without simulating.
    Validate { config: PathBuf },
    /// Write a generated workload as a workload file.
    Gen {
        /// Archetype name, e.g. sweep, pipeline-chain, dock-like.
        archetype: String,
        /// Generator parameters as TOML `key=value` pairs.
        params: Vec<String>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn gen(archetype: &str, params: &[String], seed: u64) -> Result<String, ExperimentError> {
    let mut doc = format!("archetype = {:?}\n", archetype);
    for p in params {
        doc.push_str(p);
        doc.push('\n');
    }
    let spec: WorkloadSpec = toml::from_str(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let here = std::path::Path::new(".");
    let w = spec.generate(seed, here).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    write_workload(&w.graph).map_err(|e| ConfigError::Invalid(e.to_string()).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config } => match experiment::run_experiment(&config) {
            Ok(r) => {
                for rep in r.reports() {
                    println!(
                        "{} seed {}: makespan {:.3} s, utilization {:.6}, executed {}",
                        rep.label, rep.seed, rep.makespan, rep.utilization, rep.tasks.executed
                    );
                }
                println!("wrote {}", r.csv_path.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Cmd::Compare { configs } => match experiment::compare(&configs) {
            Ok(c) => {
                print!("{}", c.to_text());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Cmd::Validate { config } => {
            let checked = config::load(&config).and_then(|(c, base)| c.validate(&base));
            match checked {
                Ok(()) => {
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.into()),
            }
        }
        Cmd::Gen { archetype, params, output, seed } => match gen(&archetype, &params, seed) {
            Ok(text) => match std::fs::write(&output, text) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(ExperimentError::Io(format!("{}: {e}", output.display()))),
            },
            Err(e) => fail(e),
        },
    }
}
