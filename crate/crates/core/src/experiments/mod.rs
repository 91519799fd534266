//! Config-driven experiments: dataset generation, seeded sweeps,
//! cross-seed reports and ρ × λ ablations. Each `cmd_*` function backs
//! the matching CLI subcommand.

pub mod config;
pub mod report;
pub mod runner;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{DataSource, DatasetSpec, ExperimentConfig, Grid, MethodEntry, TrainSection};
pub use report::{ablation_matrices, build_report, AblationMatrix, MethodSummary, Report, ScatterRow};
pub use runner::{plan_jobs, read_results, run_sweep, Job, ReportRow, RunStatus, SweepOutcome};

use crate::datasets::save_csv;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Overrides shared by the `run` and `ablate` subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed_offset: u64,
}

/// Process exit status for an error: 1 for configuration problems, 2 for
/// failures while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Param(_) => 1,
        _ => 2,
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: &'a DatasetSpec,
    rows: [usize; 3],
    warnings: &'a [String],
}

/// Generates the configured synthetic dataset and writes `train.csv`,
/// `val.csv`, `test.csv` and `manifest.json` into `out_dir`.
pub fn cmd_generate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<[usize; 3]> {
    let (data, warnings) = config::generate_splits(&cfg.dataset)?
        .ok_or_else(|| Error::Config("generate needs a spurious or imbalanced dataset source".into()))?;
    std::fs::create_dir_all(out_dir)?;
    save_csv(&data.train, out_dir.join(config::TRAIN_FILE))?;
    save_csv(&data.val, out_dir.join(config::VAL_FILE))?;
    save_csv(&data.test, out_dir.join(config::TEST_FILE))?;
    let rows = [data.train.len(), data.val.len(), data.test.len()];
    let mut json = serde_json::to_string_pretty(&Manifest {
        dataset: &cfg.dataset,
        rows,
        warnings: &warnings,
    })?;
    json.push('\n');
    std::fs::write(out_dir.join(MANIFEST_FILE), json)?;
    Ok(rows)
}

fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    let data = config::load_data(&cfg.dataset)?;
    let jobs = plan_jobs(cfg, opts.seed_offset)?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let workers = opts.workers.unwrap_or(cfg.workers).max(1);
    let outcome = run_sweep(&data, &cfg.train, &jobs, &out_dir, workers)?;
    if outcome.failures == outcome.rows.len() {
        return Err(Error::Data(format!(
            "all {} runs failed; first error: {}",
            outcome.rows.len(),
            outcome.rows[0].error
        )));
    }
    Ok(outcome)
}

/// Runs every (method, seed, grid point) and writes `results.csv`,
/// `timings.csv` and per-run JSON. Fails only if every run fails.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutcome> {
    execute(cfg, opts)
}

/// Reads `results.csv` from `dir` and writes the summary, table and
/// scatter files next to it.
pub fn cmd_report(dir: &Path) -> Result<Report> {
    let rows = read_results(dir.join(runner::RESULTS_FILE))?;
    let report = build_report(&rows)?;
    report::write_report(&report, dir)?;
    Ok(report)
}

/// Runs the ρ × λ grid for every BM-CL method and writes one
/// `ablation_<method>.csv` per method alongside the usual run outputs.
pub fn cmd_ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<AblationMatrix>> {
    let grid = cfg
        .grid
        .clone()
        .ok_or_else(|| Error::Config("ablate needs a [grid] section with rho and lambda".into()))?;
    if !cfg.method_specs()?.iter().any(|m| m.is_bmcl()) {
        return Err(Error::Config("ablate needs at least one method with a cl term".into()));
    }
    let outcome = execute(cfg, opts)?;
    let matrices = ablation_matrices(&outcome.rows, &grid.rho, &grid.lambda)?;
    for m in &matrices {
        m.write_csv(&outcome.out_dir.join(m.file_name()))?;
    }
    Ok(matrices)
}
