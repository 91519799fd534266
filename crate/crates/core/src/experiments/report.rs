//! Cross-seed aggregation of `results.csv`: summary JSON, a text table,
//! best/worst scatter data and ρ × λ ablation matrices.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::runner::ReportRow;
use crate::error::{Error, Result};
use crate::metrics::{compute_relative, mean_std, pct, FieldSummary, GroupMetrics};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "table.txt";
pub const SCATTER_FILE: &str = "scatter.csv";

pub const PAIRING_NOTE: &str = "LDE and IW are computed per seed against the ERM run with the same seed, \
then averaged across seeds. Ref best / Ref worst are accuracies at the groups that were best and worst for that ERM run.";

/// Fields reported for every method, in table order.
pub const SUMMARY_FIELDS: [&str; 9] = [
    "global_acc",
    "balanced_acc",
    "best_acc",
    "worst_acc",
    "disparity",
    "ref_best_acc",
    "ref_worst_acc",
    "lde",
    "iw",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub method: String,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub fields: Vec<FieldSummary>,
}

impl MethodSummary {
    pub fn field(&self, name: &str) -> Option<&FieldSummary> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub method: String,
    pub seed: u64,
    pub best_group_acc: f64,
    pub worst_group_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub note: String,
    pub summaries: Vec<MethodSummary>,
    #[serde(skip)]
    pub scatter: Vec<ScatterRow>,
    #[serde(skip)]
    pub table: String,
}

/// A successful run paired with its same-seed ERM reference.
struct Paired<'a> {
    row: &'a ReportRow,
    metrics: GroupMetrics,
    reference: GroupMetrics,
}

impl Paired<'_> {
    fn values(&self) -> Result<Vec<f64>> {
        let rel = compute_relative(&self.metrics, &self.reference)?;
        let m = &self.metrics;
        Ok(vec![
            m.global_acc,
            m.balanced_acc,
            m.best_acc,
            m.worst_acc,
            m.disparity,
            m.per_group_acc[rel.reference_best_group],
            m.per_group_acc[rel.reference_worst_group],
            rel.lde,
            rel.iw,
        ])
    }
}

fn erm_references(rows: &[ReportRow]) -> Result<HashMap<u64, GroupMetrics>> {
    let mut refs = HashMap::new();
    for r in rows.iter().filter(|r| r.is_erm() && r.is_ok()) {
        if let Some(m) = r.metrics()? {
            if refs.insert(r.seed, m).is_some() {
                return Err(Error::Data(format!("seed {} has more than one ERM row", r.seed)));
            }
        }
    }
    Ok(refs)
}

fn pair<'a>(rows: &'a [ReportRow], refs: &HashMap<u64, GroupMetrics>) -> Result<Vec<Paired<'a>>> {
    let mut out = Vec::new();
    for row in rows {
        let Some(metrics) = row.metrics()? else { continue };
        let reference = refs.get(&row.seed).cloned().ok_or_else(|| {
            Error::Data(format!("{} seed {} has no successful same-seed ERM run", row.method, row.seed))
        })?;
        out.push(Paired {
            row,
            metrics,
            reference,
        });
    }
    Ok(out)
}

/// Aggregates rows per (method, ρ, λ), ERM first, then in order of first
/// appearance.
pub fn build_report(rows: &[ReportRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::Data("results contain no rows".into()));
    }
    let refs = erm_references(rows)?;
    let paired = pair(rows, &refs)?;
    if paired.is_empty() {
        return Err(Error::Data("results contain no successful runs".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (&ReportRow, Vec<Vec<f64>>, usize)> = HashMap::new();
    for row in rows {
        let label = row.label();
        if !groups.contains_key(&label) {
            order.push(label.clone());
            groups.insert(label.clone(), (row, Vec::new(), 0));
        }
        if !row.is_ok() {
            groups.get_mut(&label).expect("inserted above").2 += 1;
        }
    }
    for p in &paired {
        groups.get_mut(&p.row.label()).expect("every row has a group").1.push(p.values()?);
    }
    order.sort_by_key(|l| !groups[l].0.is_erm());

    let mut summaries = Vec::new();
    for label in order {
        let (first, values, failed) = &groups[&label];
        let mut fields = Vec::new();
        if !values.is_empty() {
            for (k, name) in SUMMARY_FIELDS.iter().enumerate() {
                let column: Vec<f64> = values.iter().map(|v| v[k]).collect();
                let (mean, std) = mean_std(&column)?;
                fields.push(FieldSummary {
                    name: name.to_string(),
                    mean,
                    std,
                    n: column.len(),
                });
            }
        }
        summaries.push(MethodSummary {
            label,
            method: first.method.clone(),
            rho: first.rho,
            lambda: first.lambda,
            runs: values.len(),
            failed: *failed,
            fields,
        });
    }

    let scatter = paired
        .iter()
        .filter(|p| !p.row.is_erm())
        .map(|p| {
            let rel = compute_relative(&p.metrics, &p.reference)?;
            Ok(ScatterRow {
                method: p.row.label(),
                seed: p.row.seed,
                best_group_acc: p.metrics.per_group_acc[rel.reference_best_group],
                worst_group_acc: p.metrics.per_group_acc[rel.reference_worst_group],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let table = render_table(&summaries);
    Ok(Report {
        note: PAIRING_NOTE.to_string(),
        summaries,
        scatter,
        table,
    })
}

fn cell(s: &MethodSummary, name: &str) -> String {
    match s.field(name) {
        Some(f) => format!("{} ± {}", pct(f.mean), pct(f.std)),
        None => "n/a".to_string(),
    }
}

/// Percentages with one decimal, mean ± sample std across seeds.
pub fn render_table(summaries: &[MethodSummary]) -> String {
    let headers = [
        "Method",
        "Runs",
        "Global Acc.",
        "Balanced Acc.",
        "Best",
        "Worst",
        "Disparity (low)",
        "Ref best",
        "Ref worst",
        "LDE (low)",
        "IW (high)",
    ];
    let body: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let mut r = vec![s.label.clone(), format!("{}", s.runs)];
            r.extend(SUMMARY_FIELDS.iter().map(|f| cell(s, f)));
            r
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([headers[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    let header: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-")
    );
    for r in &body {
        let _ = writeln!(out, "{}", line(r));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{PAIRING_NOTE}");
    out
}

/// Writes `summary.json`, `table.txt` and `scatter.csv` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join(SUMMARY_FILE), json)?;
    std::fs::write(dir.join(TABLE_FILE), &report.table)?;
    let mut w = csv::Writer::from_path(dir.join(SCATTER_FILE))?;
    if report.scatter.is_empty() {
        w.write_record(["method", "seed", "best_group_acc", "worst_group_acc"])?;
    }
    for r in &report.scatter {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean test accuracy at the same-seed ERM best and worst groups over a
/// ρ × λ grid for one BM-CL method.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationMatrix {
    pub method: String,
    pub rhos: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `[rho][lambda]`, `None` when every run in the cell failed.
    pub best: Vec<Vec<Option<f64>>>,
    pub worst: Vec<Vec<Option<f64>>>,
    /// Successful seeds per cell.
    pub counts: Vec<Vec<usize>>,
}

impl AblationMatrix {
    pub fn file_name(&self) -> String {
        format!("ablation_{}.csv", self.method.to_lowercase())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["rho".to_string()];
        header.extend(self.lambdas.iter().map(|l| format!("best@lambda={l}")));
        header.extend(self.lambdas.iter().map(|l| format!("worst@lambda={l}")));
        w.write_record(&header)?;
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, rho) in self.rhos.iter().enumerate() {
            let mut rec = vec![rho.to_string()];
            rec.extend(self.best[i].iter().map(fmt));
            rec.extend(self.worst[i].iter().map(fmt));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Best-group and worst-group accuracies collected for one grid cell.
type Cell = (Vec<f64>, Vec<f64>);

fn key(v: f64) -> u64 {
    v.to_bits()
}

pub fn ablation_matrices(rows: &[ReportRow], rhos: &[f64], lambdas: &[f64]) -> Result<Vec<AblationMatrix>> {
    let refs = erm_references(rows)?;
    let paired = pair(rows, &refs)?;
    let mut methods: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.rho.is_some() && r.lambda.is_some()) {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut out = Vec::new();
    for method in methods {
        let mut cells: BTreeMap<(usize, usize), Cell> = BTreeMap::new();
        for p in paired.iter().filter(|p| p.row.method == method) {
            let (Some(rho), Some(lambda)) = (p.row.rho, p.row.lambda) else { continue };
            let (Some(i), Some(j)) = (
                rhos.iter().position(|r| key(*r) == key(rho)),
                lambdas.iter().position(|l| key(*l) == key(lambda)),
            ) else {
                continue;
            };
            let rel = compute_relative(&p.metrics, &p.reference)?;
            let c = cells.entry((i, j)).or_default();
            c.0.push(p.metrics.per_group_acc[rel.reference_best_group]);
            c.1.push(p.metrics.per_group_acc[rel.reference_worst_group]);
        }
        let mean = |v: &[f64]| mean_std(v).ok().map(|(m, _)| m);
        let grid = |pick: &dyn Fn(&Cell) -> Option<f64>| {
            (0..rhos.len())
                .map(|i| (0..lambdas.len()).map(|j| cells.get(&(i, j)).and_then(pick)).collect())
                .collect::<Vec<Vec<Option<f64>>>>()
        };
        out.push(AblationMatrix {
            best: grid(&|c| mean(&c.0)),
            worst: grid(&|c| mean(&c.1)),
            counts: (0..rhos.len())
                .map(|i| (0..lambdas.len()).map(|j| cells.get(&(i, j)).map_or(0, |c| c.0.len())).collect())
                .collect(),
            method,
            rhos: rhos.to_vec(),
            lambdas: lambdas.to_vec(),
        });
    }
    Ok(out)
}
