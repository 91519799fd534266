//! Group-labelled datasets: synthetic generators with controllable bias,
//! stratified splits, batch samplers and CSV persistence.
//!
//! A group is one `(attribute, label)` cell; its id is
//! `attribute * num_classes + label`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    group_ids: Vec<usize>,
    num_classes: usize,
    num_attributes: usize,
}

impl GroupedDataset {
    /// Builds a dataset and derives every group id from `(attribute, label)`.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        attributes: Vec<usize>,
        num_attributes: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let group_ids = labels
            .iter()
            .zip(&attributes)
            .map(|(&y, &a)| a * num_classes + y)
            .collect();
        Self::from_parts(features, dim, labels, attributes, group_ids, num_attributes, num_classes)
    }

    /// Builds a dataset from explicit group ids, checking them against the
    /// `(attribute, label)` pairs.
    pub fn from_parts(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        attributes: Vec<usize>,
        group_ids: Vec<usize>,
        num_attributes: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        if num_classes == 0 || num_attributes == 0 {
            return Err(Error::Data("need at least one class and one attribute value".into()));
        }
        if features.len() != n * dim || attributes.len() != n || group_ids.len() != n {
            return Err(Error::Data(format!(
                "column lengths disagree: {} features for dim {dim}, {n} labels, {} attributes, {} group ids",
                features.len(),
                attributes.len(),
                group_ids.len()
            )));
        }
        for i in 0..n {
            let (y, a, g) = (labels[i], attributes[i], group_ids[i]);
            if y >= num_classes {
                return Err(Error::Data(format!("sample {i}: label {y} out of range")));
            }
            if a >= num_attributes {
                return Err(Error::Data(format!("sample {i}: attribute {a} out of range")));
            }
            if g != a * num_classes + y {
                return Err(Error::Data(format!(
                    "sample {i}: group id {g} inconsistent with attribute {a} and label {y}"
                )));
            }
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value {v}")));
        }
        Ok(Self {
            features,
            dim,
            labels,
            attributes,
            group_ids,
            num_classes,
            num_attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_attributes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn group_ids(&self) -> &[usize] {
        &self.group_ids
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for &g in &self.group_ids {
            counts[g] += 1;
        }
        counts
    }

    /// Sample indices of each group, in ascending order.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (i, &g) in self.group_ids.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// Indices of every sample whose group is in `groups`.
    pub fn indices_in_groups(&self, groups: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| groups.contains(&self.group_ids[i]))
            .collect()
    }

    /// All features as an `n × dim` matrix.
    pub fn feature_matrix(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.features.clone())
    }

    /// Features of the given rows as a `rows × dim` matrix.
    pub fn batch_features(&self, rows: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor::matrix(rows.len(), self.dim, data)
    }

    pub fn subset(&self, rows: &[usize]) -> GroupedDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        GroupedDataset {
            features,
            dim: self.dim,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            attributes: rows.iter().map(|&r| self.attributes[r]).collect(),
            group_ids: rows.iter().map(|&r| self.group_ids[r]).collect(),
            num_classes: self.num_classes,
            num_attributes: self.num_attributes,
        }
    }
}

fn default_label_balance() -> f64 {
    0.5
}

/// Binary label and binary attribute with a tunable label/attribute
/// correlation. Features are `[core, spurious, noise...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousConfig {
    pub n: usize,
    /// Probability that the attribute equals the label.
    pub p_corr: f64,
    pub core_gap: f64,
    pub spur_gap: f64,
    pub sigma: f64,
    #[serde(default)]
    pub noise_dims: usize,
    /// Probability of label 1.
    #[serde(default = "default_label_balance")]
    pub label_balance: f64,
    pub seed: u64,
}

impl Default for SpuriousConfig {
    /// Calibrated so that ERM on a small MLP shows a clear worst-group gap.
    fn default() -> Self {
        Self {
            n: 5000,
            p_corr: 0.95,
            core_gap: 1.5,
            spur_gap: 4.0,
            sigma: 1.0,
            noise_dims: 2,
            label_balance: 0.5,
            seed: 0,
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn noise(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    Normal::new(0.0, sigma).map_err(|e| Error::Param(e.to_string()))
}

pub fn gen_spurious(config: &SpuriousConfig) -> Result<GroupedDataset> {
    check_probability("p_corr", config.p_corr)?;
    check_probability("label_balance", config.label_balance)?;
    let eps = noise(config.sigma)?;
    if config.n == 0 {
        return Err(Error::Param("n must be positive".into()));
    }
    let dim = 2 + config.noise_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut features = Vec::with_capacity(config.n * dim);
    let mut labels = Vec::with_capacity(config.n);
    let mut attributes = Vec::with_capacity(config.n);
    let sign = |v: usize| if v == 1 { 1.0 } else { -1.0 };
    for _ in 0..config.n {
        let y = usize::from(rng.random::<f64>() < config.label_balance);
        let a = if rng.random::<f64>() < config.p_corr { y } else { 1 - y };
        features.push(sign(y) * config.core_gap / 2.0 + eps.sample(&mut rng));
        features.push(sign(a) * config.spur_gap / 2.0 + eps.sample(&mut rng));
        for _ in 0..config.noise_dims {
            features.push(eps.sample(&mut rng));
        }
        labels.push(y);
        attributes.push(a);
    }
    GroupedDataset::new(features, dim, labels, attributes, 2, 2)
}

/// Group membership drawn from a fixed proportion vector. Features are
/// `[core, noise...]` where the core mean depends on the label and is
/// optionally shifted by the attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceConfig {
    pub n: usize,
    /// One entry per group id, `attribute * num_classes + label`.
    pub proportions: Vec<f64>,
    pub num_attributes: usize,
    pub num_classes: usize,
    pub core_gap: f64,
    /// Core-mean offset per attribute step, centred over attributes.
    #[serde(default)]
    pub attr_shift: f64,
    pub sigma: f64,
    #[serde(default)]
    pub noise_dims: usize,
    pub seed: u64,
}

pub fn gen_imbalanced(config: &ImbalanceConfig) -> Result<GroupedDataset> {
    let groups = config.num_attributes * config.num_classes;
    if config.num_classes < 2 || config.num_attributes < 1 {
        return Err(Error::Param("need at least two classes and one attribute value".into()));
    }
    if config.proportions.len() != groups {
        return Err(Error::Param(format!(
            "expected {groups} group proportions, got {}",
            config.proportions.len()
        )));
    }
    if config.proportions.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Param("group proportions must be nonnegative".into()));
    }
    let total: f64 = config.proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!("group proportions sum to {total}, not 1")));
    }
    if config.n == 0 {
        return Err(Error::Param("n must be positive".into()));
    }
    let eps = noise(config.sigma)?;
    let cumulative: Vec<f64> = config
        .proportions
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let last_nonzero = config.proportions.iter().rposition(|&p| p > 0.0).unwrap_or(0);

    let dim = 1 + config.noise_dims;
    let y_centre = (config.num_classes as f64 - 1.0) / 2.0;
    let a_centre = (config.num_attributes as f64 - 1.0) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut features = Vec::with_capacity(config.n * dim);
    let mut labels = Vec::with_capacity(config.n);
    let mut attributes = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let u: f64 = rng.random();
        let g = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(last_nonzero)
            .min(last_nonzero);
        let (a, y) = (g / config.num_classes, g % config.num_classes);
        let mean = (y as f64 - y_centre) * config.core_gap + (a as f64 - a_centre) * config.attr_shift;
        features.push(mean + eps.sample(&mut rng));
        for _ in 0..config.noise_dims {
            features.push(eps.sample(&mut rng));
        }
        labels.push(y);
        attributes.push(a);
    }
    GroupedDataset::new(
        features,
        dim,
        labels,
        attributes,
        config.num_attributes,
        config.num_classes,
    )
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
    /// Original indices of each part, ascending.
    pub indices: [Vec<usize>; 3],
    pub warnings: Vec<String>,
}

/// Group-stratified shuffle split into train/val/test.
pub fn split(ds: &GroupedDataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Param(format!("split fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!("split fractions sum to {total}, not 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut warnings = Vec::new();
    for (g, mut members) in ds.group_indices().into_iter().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        members.shuffle(&mut rng);
        let counts = if n < 3 {
            warnings.push(format!(
                "group {g} has {n} sample(s); cannot appear in all three splits, filling train first"
            ));
            [1, n - 1, 0]
        } else {
            let tr = ((fractions[0] * n as f64).round() as usize).min(n);
            let va = ((fractions[1] * n as f64).round() as usize).min(n - tr);
            let mut counts = [tr, va, n - tr - va];
            // every split gets at least one sample, taken from the largest
            while let Some(empty) = counts.iter().position(|&c| c == 0) {
                let donor = (0..3).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
                counts[donor] -= 1;
                counts[empty] += 1;
            }
            counts
        };
        let mut start = 0;
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Split {
        train: ds.subset(&parts[0]),
        val: ds.subset(&parts[1]),
        test: ds.subset(&parts[2]),
        indices: parts,
        warnings,
    })
}

/// Produces one epoch of index batches at a time.
pub trait BatchSampler {
    fn epoch(&mut self) -> Vec<Vec<usize>>;
}

/// One shuffled pass over all indices per epoch.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl UniformSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || n == 0 {
            return Err(Error::Param("uniform sampler needs batch_size >= 1 and a nonempty dataset".into()));
        }
        Ok(Self {
            order: (0..n).collect(),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BatchSampler for UniformSampler {
    fn epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Picks a group uniformly, then a member of it uniformly, with
/// replacement. An epoch is `ceil(n / batch_size)` full batches.
#[derive(Debug, Clone)]
pub struct GroupBalancedSampler {
    groups: Vec<Vec<usize>>,
    batches_per_epoch: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl GroupBalancedSampler {
    pub fn new(ds: &GroupedDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || ds.is_empty() {
            return Err(Error::Param(
                "group-balanced sampler needs batch_size >= 1 and a nonempty dataset".into(),
            ));
        }
        let groups = ds.group_indices();
        if let Some(g) = groups.iter().position(Vec::is_empty) {
            return Err(Error::EmptyGroup {
                group: g,
                context: "group-balanced sampling requires every group to have samples".into(),
            });
        }
        Ok(Self {
            groups,
            batches_per_epoch: ds.len().div_ceil(batch_size),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> usize {
        let g = self.rng.random_range(0..self.groups.len());
        let members = &self.groups[g];
        members[self.rng.random_range(0..members.len())]
    }
}

impl BatchSampler for GroupBalancedSampler {
    fn epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch)
            .map(|_| (0..self.batch_size).map(|_| self.draw()).collect())
            .collect()
    }
}

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    h.extend(["label", "attribute", "group_id"].map(String::from));
    h
}

/// Writes `f0..f{d-1},label,attribute,group_id` with 17 significant digits.
pub fn save_csv(ds: &GroupedDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(ds.dim))?;
    let mut record = Vec::with_capacity(ds.dim + 3);
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.row(i).iter().map(|v| format!("{v:.16e}")));
        record.push(ds.labels[i].to_string());
        record.push(ds.attributes[i].to_string());
        record.push(ds.group_ids[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

struct RawCsv {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    group_ids: Vec<usize>,
    lines: Vec<u64>,
}

fn read_raw(path: &Path) -> Result<RawCsv> {
    let row_err = |line: u64, msg: String| Error::CsvRow {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = File::open(path)?;
    if BufReader::new(File::open(path)?).lines().next().is_none() {
        return Err(row_err(1, "empty file".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let head = rdr.headers()?.clone();
    if head.len() < 4 {
        return Err(row_err(1, "header needs at least one feature column".into()));
    }
    let dim = head.len() - 3;
    let expected = header(dim);
    if head.iter().ne(expected.iter().map(String::as_str)) {
        return Err(row_err(1, format!("unexpected header, want {}", expected.join(","))));
    }
    let mut raw = RawCsv {
        features: Vec::new(),
        dim,
        labels: Vec::new(),
        attributes: Vec::new(),
        group_ids: Vec::new(),
        lines: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 3 {
            return Err(row_err(line, format!("expected {} fields, got {}", dim + 3, rec.len())));
        }
        for (j, field) in rec.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| row_err(line, format!("column f{j}: not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(row_err(line, format!("column f{j}: non-finite value")));
            }
            raw.features.push(v);
        }
        let int = |k: usize, name: &str| -> Result<usize> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| row_err(line, format!("{name}: not a nonnegative integer: {:?}", &rec[k])))
        };
        raw.labels.push(int(dim, "label")?);
        raw.attributes.push(int(dim + 1, "attribute")?);
        raw.group_ids.push(int(dim + 2, "group_id")?);
        raw.lines.push(line);
    }
    if raw.labels.is_empty() {
        return Err(row_err(2, "no data rows".into()));
    }
    Ok(raw)
}

fn finish(path: &Path, raw: RawCsv, num_attributes: usize, num_classes: usize) -> Result<GroupedDataset> {
    for i in 0..raw.labels.len() {
        let (y, a, g) = (raw.labels[i], raw.attributes[i], raw.group_ids[i]);
        let msg = if y >= num_classes {
            Some(format!("label {y} out of range for {num_classes} classes"))
        } else if a >= num_attributes {
            Some(format!("attribute {a} out of range for {num_attributes} values"))
        } else if g != a * num_classes + y {
            Some(format!(
                "group_id {g} inconsistent with attribute {a} and label {y} (expected {})",
                a * num_classes + y
            ))
        } else {
            None
        };
        if let Some(msg) = msg {
            return Err(Error::CsvRow {
                path: path.to_path_buf(),
                line: raw.lines[i],
                msg,
            });
        }
    }
    GroupedDataset::from_parts(
        raw.features,
        raw.dim,
        raw.labels,
        raw.attributes,
        raw.group_ids,
        num_attributes,
        num_classes,
    )
}

/// Loads a dataset CSV, inferring the label and attribute cardinalities
/// from the rows.
pub fn load_csv(path: impl AsRef<Path>) -> Result<GroupedDataset> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    let max_label = raw.labels.iter().copied().max().unwrap_or(0);
    // A row with attribute > 0 pins the class count through its group id.
    let pinned = (0..raw.labels.len())
        .find(|&i| raw.attributes[i] > 0 && raw.group_ids[i] >= raw.labels[i])
        .map(|i| (raw.group_ids[i] - raw.labels[i]) / raw.attributes[i]);
    let num_classes = pinned.unwrap_or(0).max(max_label + 1).max(2);
    let max_attr = raw.attributes.iter().copied().max().unwrap_or(0);
    let max_group = raw.group_ids.iter().copied().max().unwrap_or(0);
    let num_attributes = (max_attr + 1).max(max_group / num_classes + 1);
    finish(path, raw, num_attributes, num_classes)
}

/// Loads a dataset CSV with known label and attribute cardinalities.
pub fn load_csv_with_dims(
    path: impl AsRef<Path>,
    num_attributes: usize,
    num_classes: usize,
) -> Result<GroupedDataset> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    finish(path, raw, num_attributes, num_classes)
}
