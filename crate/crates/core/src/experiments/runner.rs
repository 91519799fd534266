//! Sweep execution: one job per (method, seed, grid point), an ERM
//! reference per seed, parallel workers and a single ordered writer.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TrainSection};
use crate::error::{Error, Result};
use crate::methods::MethodSpec;
use crate::metrics::{compute_relative, GroupMetrics};
use crate::trainer::{self, DataSplits, RunResult, TrainConfig};

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Error,
}

/// One line of `results.csv`. Metric columns are test-split values and
/// stay empty for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub status: RunStatus,
    pub error: String,
    pub global_acc: Option<f64>,
    pub balanced_acc: Option<f64>,
    pub best_group: Option<usize>,
    pub best_acc: Option<f64>,
    pub worst_group: Option<usize>,
    pub worst_acc: Option<f64>,
    pub disparity: Option<f64>,
    /// Per-group accuracies by group id, `;`-separated.
    pub group_accs: String,
    pub ref_best_group: Option<usize>,
    pub ref_worst_group: Option<usize>,
    pub lde: Option<f64>,
    pub iw: Option<f64>,
    pub selected_epoch: Option<usize>,
    pub stage1_epochs: Option<usize>,
}

impl ReportRow {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn is_erm(&self) -> bool {
        self.method == MethodSpec::ERM.to_string()
    }

    /// Test metrics rebuilt from the per-group column.
    pub fn metrics(&self) -> Result<Option<GroupMetrics>> {
        if !self.is_ok() {
            return Ok(None);
        }
        let accs = self
            .group_accs
            .split(';')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad group accuracy {s:?} for {}: {e}", self.method)))
            })
            .collect::<Result<Vec<_>>>()?;
        let global = self
            .global_acc
            .ok_or_else(|| Error::Data(format!("{} seed {} has no global accuracy", self.method, self.seed)))?;
        GroupMetrics::from_group_accuracies(accs, global).map(Some)
    }

    /// Grid-point label such as `GroupDRO-LwF rho=0.2 lambda=1`.
    pub fn label(&self) -> String {
        let mut s = self.method.clone();
        if let Some(r) = self.rho {
            s.push_str(&format!(" rho={r}"));
        }
        if let Some(l) = self.lambda {
            s.push_str(&format!(" lambda={l}"));
        }
        s
    }

    fn from_outcome(job: &Job, outcome: &Result<RunResult>, reference: Option<&GroupMetrics>) -> Self {
        let mut row = ReportRow {
            method: job.method.to_string(),
            seed: job.seed,
            rho: job.rho,
            lambda: job.lambda,
            status: RunStatus::Error,
            error: String::new(),
            global_acc: None,
            balanced_acc: None,
            best_group: None,
            best_acc: None,
            worst_group: None,
            worst_acc: None,
            disparity: None,
            group_accs: String::new(),
            ref_best_group: None,
            ref_worst_group: None,
            lde: None,
            iw: None,
            selected_epoch: None,
            stage1_epochs: None,
        };
        let run = match outcome {
            Ok(run) => run,
            Err(e) => {
                row.error = e.to_string();
                return row;
            }
        };
        let m = &run.test_metrics;
        row.status = RunStatus::Ok;
        row.global_acc = Some(m.global_acc);
        row.balanced_acc = Some(m.balanced_acc);
        row.best_group = Some(m.best_group);
        row.best_acc = Some(m.best_acc);
        row.worst_group = Some(m.worst_group);
        row.worst_acc = Some(m.worst_acc);
        row.disparity = Some(m.disparity);
        row.group_accs = join_accs(&m.per_group_acc);
        row.selected_epoch = Some(run.selected_epoch);
        row.stage1_epochs = run.stage1_epochs;
        let reference = if job.method.is_erm() { Some(m) } else { reference };
        if let Some(Ok(rel)) = reference.map(|r| compute_relative(m, r)) {
            row.ref_best_group = Some(rel.reference_best_group);
            row.ref_worst_group = Some(rel.reference_worst_group);
            row.lde = Some(rel.lde);
            row.iw = Some(rel.iw);
        }
        row
    }
}

pub fn join_accs(accs: &[f64]) -> String {
    accs.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";")
}

/// A single training run of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub method: MethodSpec,
    pub seed: u64,
    /// Set for BM-CL runs only.
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
}

impl Job {
    pub fn train_config(&self, train: &TrainSection) -> TrainConfig {
        let mut cfg = train.to_train_config(self.method, self.seed);
        if let Some(r) = self.rho {
            cfg.rho = r;
        }
        cfg
    }

    pub fn file_stem(&self, index: usize) -> String {
        let mut s = format!("{index:04}_{}_seed{}", self.method.to_string().to_lowercase(), self.seed);
        if let (Some(r), Some(l)) = (self.rho, self.lambda) {
            s.push_str(&format!("_rho{r}_lambda{l}"));
        }
        s
    }
}

/// Seed-major job list. Each seed starts with its ERM reference; ERM
/// entries in `methods` are covered by it. BM-CL methods are crossed with
/// the grid when one is given.
pub fn plan_jobs(cfg: &ExperimentConfig, seed_offset: u64) -> Result<Vec<Job>> {
    let specs = cfg.method_specs()?;
    let mut jobs = Vec::new();
    for &base in &cfg.seeds {
        let seed = base
            .checked_add(seed_offset)
            .ok_or_else(|| Error::Config(format!("seed {base} + offset {seed_offset} overflows")))?;
        jobs.push(Job {
            method: MethodSpec::ERM,
            seed,
            rho: None,
            lambda: None,
        });
        for spec in specs.iter().filter(|s| !s.is_erm()) {
            if !spec.is_bmcl() {
                jobs.push(Job {
                    method: *spec,
                    seed,
                    rho: None,
                    lambda: None,
                });
                continue;
            }
            let (rhos, lambdas) = match &cfg.grid {
                Some(g) => (g.rho.clone(), g.lambda.clone()),
                None => (vec![cfg.train.rho], vec![spec.cl.lambda().unwrap_or(0.0)]),
            };
            for &rho in &rhos {
                for &lambda in &lambdas {
                    jobs.push(Job {
                        method: MethodSpec::new(spec.bm, spec.cl.with_lambda(lambda)),
                        seed,
                        rho: Some(rho),
                        lambda: Some(lambda),
                    });
                }
            }
        }
    }
    Ok(jobs)
}

/// Per-run JSON document.
#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a TrainConfig,
    rho: Option<f64>,
    lambda: Option<f64>,
    error: Option<String>,
    result: Option<&'a RunResult>,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    index: usize,
    method: &'a str,
    seed: u64,
    rho: Option<f64>,
    lambda: Option<f64>,
    seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub failures: usize,
}

/// Runs every job and writes `results.csv`, `timings.csv` and one JSON per
/// run under `out_dir`. Rows appear in job order regardless of which
/// worker finishes first, and each row is flushed as soon as it and all
/// rows before it are complete.
pub fn run_sweep(
    data: &DataSplits,
    train: &TrainSection,
    jobs: &[Job],
    out_dir: &Path,
    workers: usize,
) -> Result<SweepOutcome> {
    if jobs.is_empty() {
        return Err(Error::Config("nothing to run".into()));
    }
    fs::create_dir_all(out_dir.join(RUNS_DIR))?;
    let mut results = csv::Writer::from_writer(File::create(out_dir.join(RESULTS_FILE))?);
    let mut timings = csv::Writer::from_writer(File::create(out_dir.join(TIMINGS_FILE))?);

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunResult>, f64)>();
    let workers = workers.clamp(1, jobs.len());

    std::thread::scope(|scope| -> Result<SweepOutcome> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let start = Instant::now();
                let outcome = trainer::train(data, &job.train_config(train));
                if tx.send((i, outcome, start.elapsed().as_secs_f64())).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut references: HashMap<u64, GroupMetrics> = HashMap::new();
        let mut rows = Vec::with_capacity(jobs.len());
        let mut failures = 0;
        for (i, outcome, secs) in rx {
            pending.insert(i, (outcome, secs));
            while let Some((outcome, secs)) = pending.remove(&rows.len()) {
                let index = rows.len();
                let job = &jobs[index];
                if job.method.is_erm() {
                    if let Ok(run) = &outcome {
                        references.insert(job.seed, run.test_metrics.clone());
                    }
                }
                let row = ReportRow::from_outcome(job, &outcome, references.get(&job.seed));
                if !row.is_ok() {
                    failures += 1;
                }
                results.serialize(&row)?;
                results.flush()?;
                timings.serialize(TimingRow {
                    index,
                    method: &row.method,
                    seed: job.seed,
                    rho: job.rho,
                    lambda: job.lambda,
                    seconds: secs,
                })?;
                timings.flush()?;
                let config = job.train_config(train);
                let record = RunRecord {
                    config: &config,
                    rho: job.rho,
                    lambda: job.lambda,
                    error: outcome.as_ref().err().map(ToString::to_string),
                    result: outcome.as_ref().ok(),
                };
                let mut f = File::create(out_dir.join(RUNS_DIR).join(format!("{}.json", job.file_stem(index))))?;
                serde_json::to_writer_pretty(&mut f, &record)?;
                f.write_all(b"\n")?;
                rows.push(row);
            }
        }
        if rows.len() != jobs.len() {
            return Err(Error::Contract(format!(
                "only {} of {} runs reported back",
                rows.len(),
                jobs.len()
            )));
        }
        Ok(SweepOutcome {
            out_dir: out_dir.to_path_buf(),
            rows,
            failures,
        })
    })
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
