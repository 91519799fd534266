//! Group-wise accuracy metrics, leveling-down / worst-group improvement
//! relative to an ERM reference, and cross-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Indexed by group id.
    pub per_group_acc: Vec<f64>,
    pub global_acc: f64,
    pub balanced_acc: f64,
    pub best_group: usize,
    pub best_acc: f64,
    pub worst_group: usize,
    pub worst_acc: f64,
    pub disparity: f64,
}

impl GroupMetrics {
    /// Derives balanced accuracy and the extremes from per-group accuracies.
    /// Ties resolve to the lowest group id.
    pub fn from_group_accuracies(per_group_acc: Vec<f64>, global_acc: f64) -> Result<Self> {
        if per_group_acc.is_empty() {
            return Err(Error::Data("no groups".into()));
        }
        if per_group_acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Data(format!("accuracies must lie in [0, 1]: {per_group_acc:?}")));
        }
        let balanced_acc = per_group_acc.iter().sum::<f64>() / per_group_acc.len() as f64;
        let mut best_group = 0;
        let mut worst_group = 0;
        for (g, &a) in per_group_acc.iter().enumerate() {
            if a > per_group_acc[best_group] {
                best_group = g;
            }
            if a < per_group_acc[worst_group] {
                worst_group = g;
            }
        }
        let best_acc = per_group_acc[best_group];
        let worst_acc = per_group_acc[worst_group];
        Ok(Self {
            per_group_acc,
            global_acc,
            balanced_acc,
            best_group,
            best_acc,
            worst_group,
            worst_acc,
            disparity: best_acc - worst_acc,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.per_group_acc.len()
    }
}

/// Accuracy per group, overall and balanced. Every group in
/// `0..num_groups` must have at least one sample.
pub fn compute_group_metrics(
    predictions: &[usize],
    labels: &[usize],
    group_ids: &[usize],
    num_groups: usize,
) -> Result<GroupMetrics> {
    if predictions.len() != labels.len() || labels.len() != group_ids.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} predictions, {} labels, {} group ids",
            predictions.len(),
            labels.len(),
            group_ids.len()
        )));
    }
    let mut correct = vec![0usize; num_groups];
    let mut total = vec![0usize; num_groups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(group_ids) {
        if g >= num_groups {
            return Err(Error::Data(format!("group id {g} out of range for {num_groups} groups")));
        }
        total[g] += 1;
        if p == y {
            correct[g] += 1;
        }
    }
    if let Some(g) = total.iter().position(|&t| t == 0) {
        return Err(Error::EmptyGroup {
            group: g,
            context: "group metrics need every group represented".into(),
        });
    }
    let per_group = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect();
    let global = correct.iter().sum::<usize>() as f64 / labels.len() as f64;
    GroupMetrics::from_group_accuracies(per_group, global)
}

/// Change at the ERM reference's best and worst groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMetrics {
    /// Accuracy lost at the reference best group (leveling-down effect).
    pub lde: f64,
    /// Accuracy gained at the reference worst group.
    pub iw: f64,
    pub reference_best_group: usize,
    pub reference_worst_group: usize,
}

pub fn compute_relative(method: &GroupMetrics, erm_ref: &GroupMetrics) -> Result<RelativeMetrics> {
    if method.num_groups() != erm_ref.num_groups() {
        return Err(Error::Data(format!(
            "group universes differ: {} vs {} groups",
            method.num_groups(),
            erm_ref.num_groups()
        )));
    }
    let (gb, gw) = (erm_ref.best_group, erm_ref.worst_group);
    Ok(RelativeMetrics {
        lde: erm_ref.per_group_acc[gb] - method.per_group_acc[gb],
        iw: method.per_group_acc[gw] - erm_ref.per_group_acc[gw],
        reference_best_group: gb,
        reference_worst_group: gw,
    })
}

/// Named scalar fields that can be averaged across runs.
pub trait MetricFields {
    fn fields(&self) -> Vec<(String, f64)>;
}

impl MetricFields for GroupMetrics {
    fn fields(&self) -> Vec<(String, f64)> {
        let mut f = vec![
            ("global_acc".to_string(), self.global_acc),
            ("balanced_acc".to_string(), self.balanced_acc),
            ("best_acc".to_string(), self.best_acc),
            ("worst_acc".to_string(), self.worst_acc),
            ("disparity".to_string(), self.disparity),
        ];
        f.extend(
            self.per_group_acc
                .iter()
                .enumerate()
                .map(|(g, &a)| (format!("acc_g{g}"), a)),
        );
        f
    }
}

impl MetricFields for RelativeMetrics {
    fn fields(&self) -> Vec<(String, f64)> {
        vec![("lde".to_string(), self.lde), ("iw".to_string(), self.iw)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub n: usize,
}

/// Mean and sample (n - 1) standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Data("cannot aggregate zero values".into()));
    }
    let n = values.len() as f64;
    let rough = values.iter().sum::<f64>() / n;
    // second pass removes the rounding of the first
    let mean = rough + values.iter().map(|v| v - rough).sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

pub fn aggregate_runs<T: MetricFields>(results: &[T]) -> Result<Vec<FieldSummary>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Data("cannot aggregate an empty list of runs".into()))?
        .fields();
    let all: Vec<Vec<(String, f64)>> = results.iter().map(MetricFields::fields).collect();
    first
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let values = all
                .iter()
                .map(|f| {
                    f.get(k)
                        .filter(|(n, _)| n == name)
                        .map(|&(_, v)| v)
                        .ok_or_else(|| Error::Data(format!("run is missing field {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&values)?;
            Ok(FieldSummary {
                name: name.clone(),
                mean,
                std,
                n: values.len(),
            })
        })
        .collect()
}

/// Percentage with one decimal, as in result tables.
pub fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}
