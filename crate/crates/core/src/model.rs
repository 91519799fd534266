//! Multi-layer perceptron classifier, snapshots and checkpoint files.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"BMCL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Empty means a single linear layer.
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Param("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Param(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Param("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(l, &(i, o))| {
                [
                    ParamSpec {
                        name: format!("layers.{l}.weight"),
                        shape: vec![i, o],
                    },
                    ParamSpec {
                        name: format!("layers.{l}.bias"),
                        shape: vec![o],
                    },
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters are stored per layer as `weight (fan_in × fan_out)` then
/// `bias (fan_out)`, so logits are `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    config: MlpConfig,
    params: Vec<Tensor>,
}

impl MlpModel {
    /// He-normal weights, zero biases.
    pub fn init(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
            let w = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            params.push(Tensor::matrix(fan_in, fan_out, w)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let params = config.layout().iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        Ok(())
    }

    /// Logits for a batch, without recording anything.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let layers = self.params.len() / 2;
        let mut h = batch.clone();
        for l in 0..layers {
            h = h.matmul(&self.params[2 * l])?.add_bias(&self.params[2 * l + 1])?;
            if l + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Recorded forward pass using parameters previously returned by
    /// [`MlpModel::register`].
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let layers = params.len() / 2;
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.argmax_rows())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                op: "set_flat_params",
                lhs: vec![self.param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            layout: self.config.layout(),
            flat: self.flat_params(),
        }
    }

    pub fn restore(snapshot: &ModelSnapshot) -> Result<Self> {
        if snapshot.layout != snapshot.config.layout() {
            return Err(Error::Contract("snapshot layout does not match its config".into()));
        }
        let mut model = Self::zeros(snapshot.config.clone())?;
        model.set_flat_params(&snapshot.flat)?;
        Ok(model)
    }

    /// Overwrites this model's parameters; the layouts must agree.
    pub fn load_snapshot(&mut self, snapshot: &ModelSnapshot) -> Result<()> {
        if snapshot.layout != self.config.layout() {
            return Err(Error::Contract(format!(
                "snapshot layout {:?} does not match model layout {:?}",
                snapshot.layout.iter().map(|p| &p.shape).collect::<Vec<_>>(),
                self.config.layout().iter().map(|p| p.shape.clone()).collect::<Vec<_>>()
            )));
        }
        self.set_flat_params(&snapshot.flat)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, encode_checkpoint(self))?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        decode_checkpoint(&fs::read(path)?)
    }
}

/// Frozen copy of the parameters as one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: MlpConfig,
    pub layout: Vec<ParamSpec>,
    pub flat: Vec<f64>,
}

impl ModelSnapshot {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Magic `BMCL`, u32 version, then the layout descriptor (input dim, class
/// count, hidden widths, init seed, parameter count) and the raw parameters.
/// Every integer and float is little-endian.
pub fn encode_checkpoint(model: &MlpModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(64 + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.input_dim as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.num_classes as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.hidden_widths.len() as u64).to_le_bytes());
    for &w in &cfg.hidden_widths {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    out.extend_from_slice(&cfg.init_seed.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.flat_params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).ok().filter(|&v| v < (1 << 40)).ok_or(Error::Checkpoint {
            offset: at,
            msg: format!("{what} out of range: {v}"),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "bad magic bytes".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let input_dim = r.usize("input_dim")?;
    let num_classes = r.usize("num_classes")?;
    let depth = r.usize("hidden layer count")?;
    let hidden_widths = (0..depth)
        .map(|_| r.usize("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let init_seed = r.u64("init_seed")?;
    let config = MlpConfig {
        input_dim,
        hidden_widths,
        num_classes,
        init_seed,
    };
    let at = r.pos;
    config.validate().map_err(|e| Error::Checkpoint {
        offset: at,
        msg: e.to_string(),
    })?;
    let count = r.usize("parameter count")?;
    if count != config.param_count() {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("parameter count {count} does not match layout ({})", config.param_count()),
        });
    }
    let payload = r.take(count * 8, "parameters")?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.pos,
            msg: "trailing bytes after parameters".into(),
        });
    }
    let mut model = MlpModel::zeros(config)?;
    model.set_flat_params(&flat)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hidden: Vec<usize>, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 4,
            hidden_widths: hidden,
            num_classes: 3,
            init_seed: seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(cfg(vec![8, 5], 3)).unwrap();
        let b = MlpModel::init(cfg(vec![8, 5], 3)).unwrap();
        assert_eq!(a, b);
        let c = MlpModel::init(cfg(vec![8, 5], 4)).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn biases_start_at_zero() {
        let m = MlpModel::init(cfg(vec![8], 1)).unwrap();
        assert!(m.params()[1].data().iter().all(|&v| v == 0.0));
        assert!(m.params()[3].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_config_is_one_linear_layer() {
        let m = MlpModel::init(cfg(vec![], 1)).unwrap();
        assert_eq!(m.params().len(), 2);
        assert_eq!(m.params()[0].shape(), &[4, 3]);
    }

    #[test]
    fn param_count_is_analytic() {
        let c = cfg(vec![8, 5], 0);
        let m = MlpModel::init(c.clone()).unwrap();
        assert_eq!(m.param_count(), (4 + 1) * 8 + (8 + 1) * 5 + (5 + 1) * 3);
        assert_eq!(m.param_count(), c.param_count());
    }

    #[test]
    fn forward_shape_and_zero_model() {
        let c = MlpConfig {
            input_dim: 3,
            hidden_widths: vec![],
            num_classes: 2,
            init_seed: 0,
        };
        let x = Tensor::matrix(32, 3, (0..96).map(|v| v as f64).collect()).unwrap();
        let m = MlpModel::init(c.clone()).unwrap();
        assert_eq!(m.forward(&x).unwrap().shape(), &[32, 2]);
        let z = MlpModel::zeros(c).unwrap();
        assert!(z.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::init(cfg(vec![], 0)).unwrap();
        assert!(m.forward(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let m = MlpModel::init(cfg(vec![6], 9)).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, -0.3, 2.0, 1.0, -1.0, 0.5, 0.0, 0.25]).unwrap();
        let mut tape = Tape::new();
        let p = m.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = m.forward_on(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &m.forward(&x).unwrap());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = MlpModel::init(cfg(vec![7], 2)).unwrap();
        let snap = m.snapshot();
        assert_eq!(snap.len(), m.param_count());
        assert_eq!(MlpModel::restore(&snap).unwrap(), m);
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            MlpModel::restore(&snap).unwrap().forward(&x).unwrap(),
            m.forward(&x).unwrap()
        );
        m.params_mut()[0].data_mut()[0] += 1.0;
        assert_ne!(snap.flat, m.flat_params());
        assert_eq!(snap.flat, MlpModel::init(cfg(vec![7], 2)).unwrap().flat_params());
    }

    #[test]
    fn load_snapshot_rejects_other_layout() {
        let snap = MlpModel::init(cfg(vec![7], 2)).unwrap().snapshot();
        let mut other = MlpModel::init(cfg(vec![6], 2)).unwrap();
        assert!(other.load_snapshot(&snap).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = MlpModel::init(cfg(vec![5, 5], 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bmcl");
        m.save_checkpoint(&path).unwrap();
        assert_eq!(MlpModel::load_checkpoint(&path).unwrap(), m);

        let bytes = encode_checkpoint(&m);
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(truncated), Err(Error::Checkpoint { .. })));

        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&wrong_version),
            Err(Error::Version { found: 7, expected: 1 })
        ));

        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad_magic),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }
}
