//! Thin command-line front end over [`sgar::cli`].
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 data error,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use sgar::cli;
use sgar::config::RunConfig;
use sgar::error::Result;

#[derive(Parser)]
#[command(name = "sgar", version, about = "Generative assisted ranking for deep metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory with config, metrics and a
    /// checkpoint.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output root.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: Recall@K and rank preservation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional dataset CSV overriding the checkpoint's configured data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sidecar split file listing test class ids, one per line.
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Comma-separated K values for Recall@K.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump synthesized variant families as CSV.
    Synth {
        /// Checkpoint supplying the encoder; raw normalized features are
        /// used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "families.csv")]
        out: PathBuf,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of: lambda, gamma, alpha, delta, tau, n.
        #[arg(long)]
        param: String,
        /// Comma-separated values to sweep.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
        /// Run the sweep values on parallel worker threads.
        #[arg(long)]
        parallel: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            RunConfig::from_toml_str(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            config,
            seed,
            output_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = Some(dir.display().to_string());
            }
            let outcome = cli::cmd_train(&cfg)?;
            if let (Some(first), Some(last)) = (outcome.reports.first(), outcome.reports.last()) {
                println!(
                    "trained {} epochs: combined loss {:.6} -> {:.6}",
                    outcome.reports.len(),
                    first.combined,
                    last.combined
                );
            }
            println!("run directory: {}", outcome.run_dir.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split_file,
            ks,
        } => {
            let report = cli::cmd_eval(
                &checkpoint,
                dataset.as_deref(),
                split_file.as_deref(),
                ks.as_deref(),
            )?;
            println!("{}", report.to_json());
            Ok(0)
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = cli::cmd_gradcheck(&cfg)?;
            for (name, err, tol) in &outcome.checks {
                let verdict = if err < tol { "pass" } else { "FAIL" };
                println!("{verdict} {name}: max relative error {err:.3e} (tolerance {tol:.0e})");
            }
            Ok(if outcome.passed() { 0 } else { 4 })
        }
        Command::Synth {
            checkpoint,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let n = cli::cmd_synth(checkpoint.as_deref(), &cfg, &out)?;
            println!("wrote {} variant rows to {}", n, out.display());
            Ok(0)
        }
        Command::Ablate {
            config,
            param,
            values,
            out,
            parallel,
        } => {
            let cfg = load_config(config.as_deref())?;
            let rows = cli::cmd_ablate(&cfg, &param, &values, &out, parallel)?;
            for row in &rows {
                match row.r_at_1 {
                    Some(r1) => println!(
                        "{}={}: R@1={:.4} rho={}",
                        param,
                        row.value,
                        r1,
                        row.rho.map_or("n/a".to_string(), |r| format!("{r:.4}")),
                    ),
                    None => println!("{}={}: {}", param, row.value, row.note),
                }
            }
            println!("wrote sweep to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
