//! TOML experiment configuration. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{
    gen_imbalanced, gen_spurious, load_csv, load_csv_with_dims, split, GroupedDataset, ImbalanceConfig,
    SpuriousConfig,
};
use crate::error::{Error, Result};
use crate::methods::{BmMethod, ClMethod, MethodSpec};
use crate::trainer::{DataSplits, TrainConfig};

pub const TRAIN_FILE: &str = "train.csv";
pub const VAL_FILE: &str = "val.csv";
pub const TEST_FILE: &str = "test.csv";

pub const DEFAULT_ETA: f64 = 0.01;
pub const DEFAULT_LAMBDA_UP: f64 = 20.0;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_workers() -> usize {
    1
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainSection,
    pub methods: Vec<MethodEntry>,
    #[serde(default)]
    pub grid: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Train/val/test fractions; ignored for CSV sources.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Spurious(SpuriousConfig::default()),
            split: default_split(),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Spurious(SpuriousConfig),
    Imbalanced(ImbalanceConfig),
    /// Directory holding `train.csv`, `val.csv` and `test.csv`.
    Csv { dir: PathBuf },
}

/// Shared training hyperparameters; method and seed come from elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub rho: f64,
    pub hidden_widths: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            patience: t.patience,
            rho: t.rho,
            hidden_widths: t.hidden_widths,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, method: MethodSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            patience: self.patience,
            rho: self.rho,
            hidden_widths: self.hidden_widths.clone(),
            method,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BmKind {
    Erm,
    GroupDro,
    ReSample,
    Jtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClKind {
    #[default]
    None,
    Lwf,
    Ewc,
}

/// One `[[methods]]` table, e.g. `{ bm = "groupdro", cl = "lwf", lambda = 1.0 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub bm: BmKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_up: Option<f64>,
    #[serde(default)]
    pub cl: ClKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl MethodEntry {
    pub fn to_spec(&self) -> Result<MethodSpec> {
        let misplaced = |key: &str, owner: &str| Err(Error::Config(format!("`{key}` only applies to {owner}")));
        if self.eta.is_some() && self.bm != BmKind::GroupDro {
            return misplaced("eta", "bm = \"groupdro\"");
        }
        if self.lambda_up.is_some() && self.bm != BmKind::Jtt {
            return misplaced("lambda_up", "bm = \"jtt\"");
        }
        if self.lambda.is_some() && self.cl == ClKind::None {
            return misplaced("lambda", "cl = \"lwf\" or \"ewc\"");
        }
        if self.temperature.is_some() && self.cl != ClKind::Lwf {
            return misplaced("temperature", "cl = \"lwf\"");
        }
        let bm = match self.bm {
            BmKind::Erm => BmMethod::Erm,
            BmKind::GroupDro => BmMethod::GroupDro {
                eta: self.eta.unwrap_or(DEFAULT_ETA),
            },
            BmKind::ReSample => BmMethod::ReSample,
            BmKind::Jtt => BmMethod::Jtt {
                lambda_up: self.lambda_up.unwrap_or(DEFAULT_LAMBDA_UP),
            },
        };
        let lambda = self.lambda.unwrap_or(DEFAULT_LAMBDA);
        let cl = match self.cl {
            ClKind::None => ClMethod::None,
            ClKind::Lwf => ClMethod::Lwf {
                temperature: self.temperature.unwrap_or(DEFAULT_TEMPERATURE),
                lambda,
            },
            ClKind::Ewc => ClMethod::Ewc { lambda },
        };
        let spec = MethodSpec::new(bm, cl);
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// Pretraining-ratio and λ values crossed for every BM-CL method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one [[methods]] entry is required".into()));
        }
        for m in &self.methods {
            m.to_spec()?;
        }
        self.train
            .to_train_config(MethodSpec::ERM, 0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(grid) = &self.grid {
            if grid.rho.is_empty() || grid.lambda.is_empty() {
                return Err(Error::Config("grid.rho and grid.lambda must both be nonempty".into()));
            }
            if let Some(r) = grid.rho.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
                return Err(Error::Config(format!("grid rho {r} outside (0, 1)")));
            }
            if let Some(l) = grid.lambda.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
                return Err(Error::Config(format!("grid lambda {l} must be nonnegative")));
            }
        }
        match &self.dataset.source {
            DataSource::Csv { dir } => {
                for f in [TRAIN_FILE, VAL_FILE, TEST_FILE] {
                    if !dir.join(f).is_file() {
                        return Err(Error::Config(format!("missing dataset file {}", dir.join(f).display())));
                    }
                }
            }
            _ => {
                if self.dataset.split.iter().any(|f| !(*f > 0.0)) {
                    return Err(Error::Config(format!(
                        "split fractions must be positive, got {:?}",
                        self.dataset.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn method_specs(&self) -> Result<Vec<MethodSpec>> {
        self.methods.iter().map(MethodEntry::to_spec).collect()
    }
}

/// Splits a freshly generated dataset, or `None` for CSV sources.
pub fn generate_splits(spec: &DatasetSpec) -> Result<Option<(DataSplits, Vec<String>)>> {
    let full: GroupedDataset = match &spec.source {
        DataSource::Spurious(c) => gen_spurious(c)?,
        DataSource::Imbalanced(c) => gen_imbalanced(c)?,
        DataSource::Csv { .. } => return Ok(None),
    };
    let s = split(&full, spec.split, spec.split_seed)?;
    Ok(Some((
        DataSplits {
            train: s.train,
            val: s.val,
            test: s.test,
        },
        s.warnings,
    )))
}

/// Loads or generates the three splits described by `spec`.
pub fn load_data(spec: &DatasetSpec) -> Result<DataSplits> {
    if let Some((data, _)) = generate_splits(spec)? {
        return Ok(data);
    }
    let DataSource::Csv { dir } = &spec.source else {
        unreachable!("generated sources return above")
    };
    let paths = [dir.join(TRAIN_FILE), dir.join(VAL_FILE), dir.join(TEST_FILE)];
    let inferred = paths.iter().map(load_csv).collect::<Result<Vec<_>>>()?;
    let attrs = inferred.iter().map(GroupedDataset::num_attributes).max().unwrap_or(1);
    let classes = inferred.iter().map(GroupedDataset::num_classes).max().unwrap_or(2);
    let mut parts = paths
        .iter()
        .map(|p| load_csv_with_dims(p, attrs, classes))
        .collect::<Result<Vec<_>>>()?;
    if parts[0].dim() != parts[1].dim() || parts[0].dim() != parts[2].dim() {
        return Err(Error::Data(format!(
            "feature widths differ across splits: {} / {} / {}",
            parts[0].dim(),
            parts[1].dim(),
            parts[2].dim()
        )));
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(DataSplits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seeds = [0, 1]
        [dataset.source.spurious]
        n = 400
        p_corr = 0.9
        core_gap = 1.5
        spur_gap = 4.0
        sigma = 1.0
        seed = 3
        [[methods]]
        bm = "groupdro"
        cl = "lwf"
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.train, TrainSection::default());
        assert_eq!(cfg.dataset.split, [0.7, 0.1, 0.2]);
        let spec = cfg.methods[0].to_spec().unwrap();
        assert_eq!(
            spec,
            MethodSpec::new(
                BmMethod::GroupDro { eta: DEFAULT_ETA },
                ClMethod::Lwf {
                    temperature: DEFAULT_TEMPERATURE,
                    lambda: DEFAULT_LAMBDA
                }
            )
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("seeds = [0, 1]", "seeds = [0, 1]\nworkres = 2");
        assert!(matches!(ExperimentConfig::from_toml_str(&typo), Err(Error::Config(_))));
        let nested = MINIMAL.replace("sigma = 1.0", "sigma = 1.0\nsigam = 2.0");
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
        let train = format!("{MINIMAL}\n[train]\nepochs = 3\nlearning_rate = 0.1\n");
        assert!(ExperimentConfig::from_toml_str(&train).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let no_seeds = MINIMAL.replace("seeds = [0, 1]", "seeds = []");
        assert!(matches!(ExperimentConfig::from_toml_str(&no_seeds), Err(Error::Config(_))));
        let misplaced = MINIMAL.replace("cl = \"lwf\"", "cl = \"none\"\nlambda = 2.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&misplaced), Err(Error::Config(_))));
        let bad_eta = MINIMAL.replace("cl = \"lwf\"", "eta = -1.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad_eta), Err(Error::Config(_))));
        let bad_grid = format!("{MINIMAL}\n[grid]\nrho = [1.5]\nlambda = [1.0]\n");
        assert!(ExperimentConfig::from_toml_str(&bad_grid).is_err());
        let missing = MINIMAL
            .split("[dataset.source.spurious]")
            .next()
            .unwrap()
            .to_string()
            + "[dataset.source.csv]\ndir = \"/nonexistent/data\"\n[[methods]]\nbm = \"erm\"\n";
        assert!(matches!(ExperimentConfig::from_toml_str(&missing), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn generated_and_csv_sources_agree() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let data = load_data(&cfg.dataset).unwrap();
        assert_eq!(data.train.len() + data.val.len() + data.test.len(), 400);
        let dir = tempfile::tempdir().unwrap();
        crate::datasets::save_csv(&data.train, dir.path().join(TRAIN_FILE)).unwrap();
        crate::datasets::save_csv(&data.val, dir.path().join(VAL_FILE)).unwrap();
        crate::datasets::save_csv(&data.test, dir.path().join(TEST_FILE)).unwrap();
        let spec = DatasetSpec {
            source: DataSource::Csv {
                dir: dir.path().to_path_buf(),
            },
            ..DatasetSpec::default()
        };
        let back = load_data(&spec).unwrap();
        assert_eq!(back.train.features(), data.train.features());
        assert_eq!(back.test.group_ids(), data.test.group_ids());
        assert_eq!(back.val.num_groups(), 4);
    }
}
