use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bmcl::experiments::{self, exit_code, ExperimentConfig, RunOptions};
use bmcl::{Error, Result};

#[derive(Parser)]
#[command(name = "bmcl", version, about = "Two-stage bias mitigation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test CSVs and a manifest for the configured generator.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method and seed, writing results.csv and per-run JSON.
    Run(RunArgs),
    /// Aggregate results.csv into summary.json, table.txt and scatter.csv.
    Report {
        /// Results directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the rho x lambda grid and write ablation_<method>.csv files.
    Ablate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out.clone(),
            workers: self.workers,
            seed_offset: self.seed_offset,
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let [train, val, test] = experiments::cmd_generate(&cfg, &dir)?;
            println!("wrote {train}/{val}/{test} train/val/test rows to {}", dir.display());
        }
        Command::Run(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let outcome = experiments::cmd_run(&cfg, &args.options())?;
            println!(
                "{} runs ({} failed), results in {}",
                outcome.rows.len(),
                outcome.failures,
                outcome.out_dir.display()
            );
        }
        Command::Report { out, config } => {
            let dir = match (out, config) {
                (Some(dir), _) => dir,
                (None, Some(config)) => ExperimentConfig::load(config)?.output_dir,
                (None, None) => return Err(Error::Config("report needs --out or --config".into())),
            };
            let report = experiments::cmd_report(&dir)?;
            print!("{}", report.table);
        }
        Command::Ablate(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            for m in experiments::cmd_ablate(&cfg, &args.options())? {
                println!("wrote {}", m.file_name());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
