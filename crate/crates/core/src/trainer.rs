//! SGD training loops, early stopping with worst-group model selection,
//! group partitioning and the two-stage bias-mitigation pipeline.
//!
//! The pipeline trains ERM for `max(1, floor(rho * epochs))` epochs,
//! freezes that model, splits the groups by validation accuracy around
//! their mean, and then fine-tunes with a bias-mitigation objective plus a
//! continual-learning penalty that protects the best groups.

use serde::{Deserialize, Serialize};

use crate::datasets::{BatchSampler, GroupBalancedSampler, GroupedDataset, UniformSampler};
use crate::error::{Error, Result};
use crate::methods::{
    build_lwf_cache, combine, jtt_identify, jtt_weights, loss_erm, loss_ewc, loss_groupdro,
    per_sample_ce, weighted_mean, BmMethod, ClMethod, EwcState, GroupDroState, LwfCache, MethodSpec,
};
use crate::metrics::{compute_group_metrics, GroupMetrics};
use crate::model::{MlpConfig, MlpModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Fraction of `epochs` spent in stage-1 ERM.
    pub rho: f64,
    pub hidden_widths: Vec<usize>,
    pub method: MethodSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            patience: 10,
            rho: 0.2,
            hidden_widths: vec![16],
            method: MethodSpec::ERM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Param(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Param("weight_decay must be nonnegative".into()));
        }
        if !self.momentum.is_finite() {
            return Err(Error::Param("momentum must be finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Param("patience must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Param(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        self.method.validate()
    }

    /// `max(1, floor(rho * epochs))`.
    pub fn stage1_epochs(&self) -> usize {
        ((self.rho * self.epochs as f64).floor() as usize).max(1)
    }

    pub fn model_config(&self, data: &DataSplits) -> MlpConfig {
        MlpConfig {
            input_dim: data.train.dim(),
            hidden_widths: self.hidden_widths.clone(),
            num_classes: data.train.num_classes().max(2),
            init_seed: self.seed,
        }
    }
}

/// Independent RNG streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ErmSampler = 1,
    BmSampler = 2,
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    // splitmix64 of (seed, stream)
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            velocity: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != model.params().len() || state.velocity.len() != grads.len() {
        return Err(Error::Contract(format!(
            "sgd_step: {} parameters, {} gradients, {} velocity buffers",
            model.params().len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = grad + weight_decay * *theta;
            *vel = momentum * *vel + g;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

pub fn evaluate(model: &MlpModel, ds: &GroupedDataset) -> Result<GroupMetrics> {
    let pred = model.predict(&ds.feature_matrix()?)?;
    compute_group_metrics(&pred, ds.labels(), ds.group_ids(), ds.num_groups())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Plain ERM (baselines and JTT identification).
    Erm,
    /// Truncated ERM before the partition.
    Pretrain,
    /// Bias-mitigation training, with or without a CL penalty.
    Mitigate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted within its stage.
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    pub val_group_acc: Vec<f64>,
    pub val_worst_acc: f64,
    pub val_balanced_acc: f64,
    /// Objective value of every optimizer step in order.
    #[serde(skip)]
    pub batch_losses: Vec<f64>,
}

/// Best and worst groups by validation accuracy around their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub alpha: Vec<f64>,
    pub tau: f64,
    pub best: Vec<usize>,
    pub worst: Vec<usize>,
}

impl GroupPartition {
    /// `best = {g : alpha_g > tau}`, `worst` the rest, `tau = mean(alpha)`.
    pub fn from_accuracies(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Data("cannot partition zero groups".into()));
        }
        let tau = alpha.iter().sum::<f64>() / alpha.len() as f64;
        let (best, worst): (Vec<usize>, Vec<usize>) = (0..alpha.len()).partition(|&g| alpha[g] > tau);
        if best.is_empty() {
            return Err(Error::DegeneratePartition(format!(
                "every group accuracy is at or below the mean {tau}; the fine-tuning stage needs at least one best group"
            )));
        }
        Ok(Self {
            alpha,
            tau,
            best,
            worst,
        })
    }
}

pub fn partition_groups(model: &MlpModel, val: &GroupedDataset) -> Result<GroupPartition> {
    GroupPartition::from_accuracies(evaluate(model, val)?.per_group_acc)
}

/// Continual-learning penalty active during fine-tuning.
#[derive(Debug, Clone)]
pub enum ClState {
    Lwf(LwfCache),
    Ewc(EwcState),
}

/// Per-batch bias-mitigation objective.
#[derive(Debug, Clone)]
enum BmObjective {
    Mean,
    GroupDro(GroupDroState),
    Weighted(Vec<f64>),
}

struct Regularizer<'a> {
    state: &'a ClState,
    lambda: f64,
}

struct StageOutcome {
    last: MlpModel,
    /// `(index into the stage's records, model)` of the best validation
    /// worst-group accuracy.
    best: (usize, MlpModel),
    records: Vec<EpochRecord>,
}

struct StageSpec<'a> {
    stage: Stage,
    epochs: usize,
    early_stop: bool,
    objective: BmObjective,
    regularizer: Option<Regularizer<'a>>,
}

fn run_stage(
    mut model: MlpModel,
    train: &GroupedDataset,
    val: &GroupedDataset,
    cfg: &TrainConfig,
    sampler: &mut dyn BatchSampler,
    mut spec: StageSpec<'_>,
) -> Result<StageOutcome> {
    let mut sgd = SgdState::zeros_like(&model);
    let mut records = Vec::with_capacity(spec.epochs);
    let mut best: Option<(usize, f64, MlpModel)> = None;
    let mut since_best = 0;

    for epoch in 1..=spec.epochs {
        let mut batch_losses = Vec::new();
        for batch in sampler.epoch() {
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let x = tape.constant(train.batch_features(&batch)?);
            let logits = model.forward_on(&mut tape, &params, x)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();

            let bm = match &mut spec.objective {
                BmObjective::Mean => loss_erm(&mut tape, logits, &labels)?,
                BmObjective::GroupDro(state) => {
                    let ce = per_sample_ce(&mut tape, logits, &labels)?;
                    let groups: Vec<usize> = batch.iter().map(|&i| train.group_ids()[i]).collect();
                    let (loss, next) = loss_groupdro(&mut tape, ce, &groups, state)?;
                    *state = next;
                    loss
                }
                BmObjective::Weighted(weights) => {
                    let ce = per_sample_ce(&mut tape, logits, &labels)?;
                    let w: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
                    weighted_mean(&mut tape, ce, &w)?
                }
            };
            let loss = match &spec.regularizer {
                None => bm,
                Some(reg) => {
                    let cl = match reg.state {
                        ClState::Lwf(cache) => cache.batch_loss(&mut tape, logits, &batch)?,
                        ClState::Ewc(state) => loss_ewc(&mut tape, &params, state)?,
                    };
                    combine(&mut tape, bm, cl, reg.lambda)?
                }
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Data(format!("non-finite loss at {:?} epoch {epoch}", spec.stage)));
            }
            batch_losses.push(value);
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.get(p)).collect();
            sgd_step(&mut model, &grads, &mut sgd, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        }

        let metrics = evaluate(&model, val)?;
        let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        records.push(EpochRecord {
            epoch,
            stage: spec.stage,
            mean_loss,
            val_group_acc: metrics.per_group_acc.clone(),
            val_worst_acc: metrics.worst_acc,
            val_balanced_acc: metrics.balanced_acc,
            batch_losses,
        });

        let improved = best.as_ref().is_none_or(|(_, w, _)| metrics.worst_acc > *w);
        if improved {
            best = Some((epoch - 1, metrics.worst_acc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if spec.early_stop && since_best >= cfg.patience {
                break;
            }
        }
    }
    let (idx, _, best_model) = best.ok_or_else(|| Error::Contract("a stage needs at least one epoch".into()))?;
    Ok(StageOutcome {
        last: model,
        best: (idx, best_model),
        records,
    })
}

/// Result of an ERM training call.
#[derive(Debug, Clone)]
pub struct ErmOutcome {
    /// The selected model when early stopping was active, else the last.
    pub model: MlpModel,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
}

/// Minimizes mean cross-entropy with the uniform sampler. With the full
/// budget (`epoch_budget == cfg.epochs`) early stopping and worst-group
/// selection apply; a shorter budget is a plain truncation.
pub fn train_erm(
    model: MlpModel,
    train: &GroupedDataset,
    val: &GroupedDataset,
    cfg: &TrainConfig,
    epoch_budget: usize,
) -> Result<ErmOutcome> {
    if epoch_budget == 0 {
        return Err(Error::Param("ERM epoch budget must be at least 1".into()));
    }
    let full = epoch_budget == cfg.epochs;
    let mut sampler = UniformSampler::new(train.len(), cfg.batch_size, stream_seed(cfg.seed, Stream::ErmSampler))?;
    let out = run_stage(
        model,
        train,
        val,
        cfg,
        &mut sampler,
        StageSpec {
            stage: if full { Stage::Erm } else { Stage::Pretrain },
            epochs: epoch_budget,
            early_stop: full,
            objective: BmObjective::Mean,
            regularizer: None,
        },
    )?;
    Ok(if full {
        ErmOutcome {
            model: out.best.1,
            history: out.records,
            selected_epoch: Some(out.best.0),
        }
    } else {
        ErmOutcome {
            model: out.last,
            history: out.records,
            selected_epoch: None,
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub method: String,
    pub history: Vec<EpochRecord>,
    /// Index into `history`.
    pub selected_epoch: usize,
    #[serde(skip)]
    pub model: MlpModel,
    pub partition: Option<GroupPartition>,
    pub stage1_epochs: Option<usize>,
    pub jtt_error_set_size: Option<usize>,
    pub val_metrics: GroupMetrics,
    pub test_metrics: GroupMetrics,
}

impl RunResult {
    /// Objective values of every fine-tuning step.
    pub fn mitigation_batch_losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.stage == Stage::Mitigate)
            .flat_map(|r| r.batch_losses.iter().copied())
            .collect()
    }
}

/// Bias-mitigation objective for a method, running JTT's identification
/// ERM when needed. Returns the objective and the JTT error-set size.
fn bm_objective(data: &DataSplits, cfg: &TrainConfig) -> Result<(BmObjective, Option<usize>)> {
    Ok(match cfg.method.bm {
        BmMethod::Erm | BmMethod::ReSample => (BmObjective::Mean, None),
        BmMethod::GroupDro { eta } => (
            BmObjective::GroupDro(GroupDroState::uniform(data.train.num_groups(), eta)),
            None,
        ),
        BmMethod::Jtt { lambda_up } => {
            let id_cfg = TrainConfig {
                method: MethodSpec::ERM,
                ..cfg.clone()
            };
            let init = MlpModel::init(cfg.model_config(data))?;
            let identifier = train_erm(init, &data.train, &data.val, &id_cfg, cfg.epochs)?;
            let errors = jtt_identify(&identifier.model, &data.train)?;
            let weights = jtt_weights(&errors, lambda_up, data.train.len())?;
            (BmObjective::Weighted(weights), Some(errors.len()))
        }
    })
}

fn bm_sampler(data: &DataSplits, cfg: &TrainConfig) -> Result<Box<dyn BatchSampler>> {
    let seed = stream_seed(cfg.seed, Stream::BmSampler);
    Ok(match cfg.method.bm {
        BmMethod::ReSample => Box::new(GroupBalancedSampler::new(&data.train, cfg.batch_size, seed)?),
        _ => Box::new(UniformSampler::new(data.train.len(), cfg.batch_size, seed)?),
    })
}

/// Trains `model` for `epochs` with the configured bias-mitigation
/// objective and an optional CL penalty, with early stopping and
/// worst-group selection. Returns the stage records, the selected record
/// index and the selected model.
pub fn fine_tune(
    model: MlpModel,
    data: &DataSplits,
    cfg: &TrainConfig,
    epochs: usize,
    cl: Option<&ClState>,
) -> Result<(Vec<EpochRecord>, usize, MlpModel, Option<usize>)> {
    if epochs == 0 {
        return Err(Error::Param("fine-tuning needs at least one epoch".into()));
    }
    let (objective, jtt_errors) = bm_objective(data, cfg)?;
    let mut sampler = bm_sampler(data, cfg)?;
    let regularizer = cl.map(|state| Regularizer {
        state,
        lambda: cfg.method.cl.effective_lambda(),
    });
    let out = run_stage(
        model,
        &data.train,
        &data.val,
        cfg,
        sampler.as_mut(),
        StageSpec {
            stage: Stage::Mitigate,
            epochs,
            early_stop: true,
            objective,
            regularizer,
        },
    )?;
    Ok((out.records, out.best.0, out.best.1, jtt_errors))
}

/// Two-stage training: truncated ERM, partition on validation, then
/// bias-mitigation fine-tuning regularized toward the stage-1 model.
pub fn train_bmcl(data: &DataSplits, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.method.is_erm() {
        return Err(Error::Param("two-stage training needs a mitigation method or a CL term".into()));
    }
    let stage1 = cfg.stage1_epochs();
    if stage1 >= cfg.epochs {
        return Err(Error::Param(format!(
            "stage 1 takes {stage1} of {} epochs, leaving none for fine-tuning",
            cfg.epochs
        )));
    }
    let init = MlpModel::init(cfg.model_config(data))?;
    let pre = train_erm(init, &data.train, &data.val, cfg, stage1)?;
    let anchor = pre.model;
    let partition = partition_groups(&anchor, &data.val)?;
    let best_train = data.train.indices_in_groups(&partition.best);
    if best_train.is_empty() {
        return Err(Error::DegeneratePartition(format!(
            "best groups {:?} have no training samples",
            partition.best
        )));
    }
    let cl_state = match cfg.method.cl {
        ClMethod::None => None,
        ClMethod::Lwf { temperature, .. } => Some(ClState::Lwf(build_lwf_cache(
            &anchor.snapshot(),
            &data.train,
            &best_train,
            temperature,
        )?)),
        ClMethod::Ewc { .. } => Some(ClState::Ewc(EwcState::from_model(&anchor, &data.train, &best_train)?)),
    };

    let (records, selected, model, jtt) =
        fine_tune(anchor, data, cfg, cfg.epochs - stage1, cl_state.as_ref())?;
    let mut history = pre.history;
    let offset = history.len();
    history.extend(records);
    let selected_epoch = offset + selected;
    Ok(RunResult {
        method: cfg.method.to_string(),
        val_metrics: evaluate(&model, &data.val)?,
        test_metrics: evaluate(&model, &data.test)?,
        history,
        selected_epoch,
        model,
        partition: Some(partition),
        stage1_epochs: Some(stage1),
        jtt_error_set_size: jtt,
    })
}

/// Single-phase training of a baseline (no CL term) from a fresh model.
pub fn train_baseline_bm(data: &DataSplits, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.method.cl != ClMethod::None {
        return Err(Error::Param("baselines take no CL term; use train_bmcl".into()));
    }
    let init = MlpModel::init(cfg.model_config(data))?;
    let (history, selected_epoch, model, jtt) = if cfg.method.bm == BmMethod::Erm {
        let out = train_erm(init, &data.train, &data.val, cfg, cfg.epochs)?;
        let sel = out.selected_epoch.unwrap_or(out.history.len() - 1);
        (out.history, sel, out.model, None)
    } else {
        fine_tune(init, data, cfg, cfg.epochs, None)?
    };
    Ok(RunResult {
        method: cfg.method.to_string(),
        val_metrics: evaluate(&model, &data.val)?,
        test_metrics: evaluate(&model, &data.test)?,
        history,
        selected_epoch,
        model,
        partition: None,
        stage1_epochs: None,
        jtt_error_set_size: jtt,
    })
}

/// Dispatches on whether the method has a CL term.
pub fn train(data: &DataSplits, cfg: &TrainConfig) -> Result<RunResult> {
    if cfg.method.is_bmcl() {
        train_bmcl(data, cfg)
    } else {
        train_baseline_bm(data, cfg)
    }
}
