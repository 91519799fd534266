//! Loss terms and per-method state: ERM, GroupDRO, JTT weighting, LwF
//! distillation and the EWC penalty with its Fisher estimate.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::GroupedDataset;
use crate::error::{Error, Result};
use crate::model::{MlpModel, ModelSnapshot};
use crate::tensor::{Tape, Tensor, Var};

/// EWC strengths are multiplied by this before use so that one λ grid
/// serves both regularizers.
pub const EWC_LAMBDA_SCALE: f64 = 1e3;

/// Floor applied to cached soft targets before taking their log.
const TARGET_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BmMethod {
    Erm,
    GroupDro { eta: f64 },
    ReSample,
    Jtt { lambda_up: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClMethod {
    None,
    Lwf { temperature: f64, lambda: f64 },
    Ewc { lambda: f64 },
}

impl ClMethod {
    /// User-facing λ, before any internal scaling.
    pub fn lambda(&self) -> Option<f64> {
        match *self {
            ClMethod::None => None,
            ClMethod::Lwf { lambda, .. } | ClMethod::Ewc { lambda } => Some(lambda),
        }
    }

    /// λ as applied to the loss.
    pub fn effective_lambda(&self) -> f64 {
        match *self {
            ClMethod::None => 0.0,
            ClMethod::Lwf { lambda, .. } => lambda,
            ClMethod::Ewc { lambda } => lambda * EWC_LAMBDA_SCALE,
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        match self {
            ClMethod::None => ClMethod::None,
            ClMethod::Lwf { temperature, .. } => ClMethod::Lwf { temperature, lambda },
            ClMethod::Ewc { .. } => ClMethod::Ewc { lambda },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub bm: BmMethod,
    pub cl: ClMethod,
}

impl MethodSpec {
    pub const ERM: MethodSpec = MethodSpec {
        bm: BmMethod::Erm,
        cl: ClMethod::None,
    };

    pub fn new(bm: BmMethod, cl: ClMethod) -> Self {
        Self { bm, cl }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bm {
            BmMethod::GroupDro { eta } if !(eta > 0.0) || !eta.is_finite() => {
                return Err(Error::Param(format!("GroupDRO eta must be positive, got {eta}")))
            }
            BmMethod::Jtt { lambda_up } if !(lambda_up >= 1.0) || !lambda_up.is_finite() => {
                return Err(Error::Param(format!("JTT lambda_up must be >= 1, got {lambda_up}")))
            }
            _ => {}
        }
        match self.cl {
            ClMethod::Lwf { temperature, .. } if !(temperature > 0.0) || !temperature.is_finite() => {
                return Err(Error::Param(format!("LwF temperature must be positive, got {temperature}")))
            }
            _ => {}
        }
        if let Some(l) = self.cl.lambda() {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Param(format!("lambda must be nonnegative, got {l}")));
            }
        }
        Ok(())
    }

    pub fn is_erm(&self) -> bool {
        self.bm == BmMethod::Erm && self.cl == ClMethod::None
    }

    pub fn is_bmcl(&self) -> bool {
        self.cl != ClMethod::None
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bm = match self.bm {
            BmMethod::Erm => "ERM",
            BmMethod::GroupDro { .. } => "GroupDRO",
            BmMethod::ReSample => "ReSample",
            BmMethod::Jtt { .. } => "JTT",
        };
        match self.cl {
            ClMethod::None => f.write_str(bm),
            ClMethod::Lwf { .. } => write!(f, "{bm}-LwF"),
            ClMethod::Ewc { .. } => write!(f, "{bm}-EWC"),
        }
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![n, classes],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Cross-entropy of each row, as a length-`n` vector.
pub fn per_sample_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![],
        });
    }
    check_labels(labels, shape[0], shape[1])?;
    let logp = tape.log_softmax_temp(logits, 1.0)?;
    let picked = tape.gather(logp, labels)?;
    Ok(tape.scale(picked, -1.0))
}

/// Mean cross-entropy.
pub fn loss_erm(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let ce = per_sample_ce(tape, logits, labels)?;
    Ok(tape.mean(ce))
}

/// Mean loss of each group present in the batch.
pub fn group_mean_losses(losses: &[f64], group_ids: &[usize], num_groups: usize) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; num_groups];
    let mut counts = vec![0usize; num_groups];
    for (&l, &g) in losses.iter().zip(group_ids) {
        sums[g] += l;
        counts[g] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Adversarial group weights for GroupDRO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDroState {
    pub weights: Vec<f64>,
    pub eta: f64,
}

impl GroupDroState {
    pub fn uniform(num_groups: usize, eta: f64) -> Self {
        Self {
            weights: vec![1.0 / num_groups as f64; num_groups],
            eta,
        }
    }

    /// Exponentiated-gradient step `w_g <- w_g exp(eta L_g)` over the groups
    /// present, then renormalized over all groups.
    pub fn updated(&self, group_losses: &[Option<f64>]) -> GroupDroState {
        let mut w: Vec<f64> = self
            .weights
            .iter()
            .zip(group_losses)
            .map(|(&w, l)| match l {
                Some(l) => w * (self.eta * l).exp(),
                None => w,
            })
            .collect();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        GroupDroState {
            weights: w,
            eta: self.eta,
        }
    }
}

/// `sum_g w_g L_g` over groups present in the batch, with the weights held
/// constant.
pub fn groupdro_objective(
    tape: &mut Tape,
    per_sample: Var,
    group_ids: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let n = tape.value(per_sample).len();
    if group_ids.len() != n {
        return Err(Error::Shape {
            op: "groupdro",
            lhs: vec![n],
            rhs: vec![group_ids.len()],
        });
    }
    let mut counts = vec![0usize; weights.len()];
    for &g in group_ids {
        if g >= weights.len() {
            return Err(Error::Contract(format!("group {g} has no GroupDRO weight")));
        }
        counts[g] += 1;
    }
    let coef: Vec<f64> = group_ids.iter().map(|&g| weights[g] / counts[g] as f64).collect();
    let c = tape.constant(Tensor::vector(coef));
    let weighted = tape.mul(per_sample, c)?;
    Ok(tape.sum(weighted))
}

/// One GroupDRO step: update the weights with this batch's group losses
/// and return the reweighted loss under the new weights.
pub fn loss_groupdro(
    tape: &mut Tape,
    per_sample: Var,
    group_ids: &[usize],
    state: &GroupDroState,
) -> Result<(Var, GroupDroState)> {
    let losses = tape.value(per_sample).data().to_vec();
    let next = state.updated(&group_mean_losses(&losses, group_ids, state.weights.len()));
    let loss = groupdro_objective(tape, per_sample, group_ids, &next.weights)?;
    Ok((loss, next))
}

/// Indices the model misclassifies.
pub fn jtt_identify(model: &MlpModel, train: &GroupedDataset) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::Data("JTT identification needs a nonempty training set".into()));
    }
    let pred = model.predict(&train.feature_matrix()?)?;
    Ok(pred
        .iter()
        .zip(train.labels())
        .enumerate()
        .filter(|(_, (p, y))| p != y)
        .map(|(i, _)| i)
        .collect())
}

/// `lambda_up` on the error set, 1 elsewhere.
pub fn jtt_weights(error_set: &[usize], lambda_up: f64, n: usize) -> Result<Vec<f64>> {
    if !(lambda_up >= 1.0) {
        return Err(Error::Param(format!("lambda_up must be >= 1, got {lambda_up}")));
    }
    let mut w = vec![1.0; n];
    for &i in error_set {
        if i >= n {
            return Err(Error::Contract(format!("error-set index {i} out of range for {n} samples")));
        }
        w[i] = lambda_up;
    }
    Ok(w)
}

/// `sum_i w_i l_i / sum_i w_i`. Uniform weights reduce to the plain mean.
pub fn weighted_mean(tape: &mut Tape, per_sample: Var, weights: &[f64]) -> Result<Var> {
    let n = tape.value(per_sample).len();
    if weights.len() != n {
        return Err(Error::Shape {
            op: "weighted_mean",
            lhs: vec![n],
            rhs: vec![weights.len()],
        });
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(tape.mean(per_sample));
    }
    let total: f64 = weights.iter().sum();
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let prod = tape.mul(per_sample, w)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / total))
}

/// Frozen soft targets of the stage-1 model on best-group samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LwfCache {
    pub temperature: f64,
    targets: BTreeMap<usize, Vec<f64>>,
}

impl LwfCache {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target(&self, index: usize) -> Option<&[f64]> {
        self.targets.get(&index).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.targets.iter().map(|(&i, t)| (i, t.as_slice()))
    }

    /// Distillation loss over the rows of `logits` whose sample is cached.
    /// Returns a zero constant when none are.
    pub fn batch_loss(&self, tape: &mut Tape, logits: Var, batch: &[usize]) -> Result<Var> {
        let (rows, targets): (Vec<usize>, Vec<&[f64]>) = batch
            .iter()
            .enumerate()
            .filter_map(|(r, i)| self.target(*i).map(|t| (r, t)))
            .unzip();
        if rows.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let c = targets[0].len();
        let flat: Vec<f64> = targets.iter().flat_map(|t| t.iter().copied()).collect();
        let selected = tape.select_rows(logits, &rows)?;
        loss_lwf(tape, selected, &Tensor::matrix(rows.len(), c, flat)?, self.temperature)
    }
}

pub fn build_lwf_cache(
    snapshot: &ModelSnapshot,
    dataset: &GroupedDataset,
    best_indices: &[usize],
    temperature: f64,
) -> Result<LwfCache> {
    if best_indices.is_empty() {
        return Err(Error::DegeneratePartition(
            "LwF needs at least one best-group sample".into(),
        ));
    }
    let model = MlpModel::restore(snapshot)?;
    let probs = model
        .forward(&dataset.batch_features(best_indices)?)?
        .softmax_temp(temperature)?;
    let targets = best_indices
        .iter()
        .enumerate()
        .map(|(r, &i)| (i, probs.row(r).to_vec()))
        .collect();
    Ok(LwfCache {
        temperature,
        targets,
    })
}

/// Mean over rows of `KL(q* || softmax(logits / T))`.
pub fn loss_lwf(tape: &mut Tape, logits: Var, targets: &Tensor, temperature: f64) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape != targets.shape() {
        return Err(Error::Shape {
            op: "loss_lwf",
            lhs: shape,
            rhs: targets.shape().to_vec(),
        });
    }
    let m = shape[0] as f64;
    let neg_entropy: f64 = targets
        .data()
        .iter()
        .map(|&q| q * q.max(TARGET_FLOOR).ln())
        .sum();
    let logq = tape.log_softmax_temp(logits, temperature)?;
    let q_star = tape.constant(targets.clone());
    let prod = tape.mul(logq, q_star)?;
    let cross = tape.sum(prod);
    let kl_sum = tape.scale(cross, -1.0);
    let kl_sum = tape.add_const(kl_sum, neg_entropy);
    Ok(tape.scale(kl_sum, 1.0 / m))
}

/// Anchor parameters and their diagonal Fisher importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub theta_star: Vec<f64>,
    pub fisher_diag: Vec<f64>,
}

impl EwcState {
    pub fn new(theta_star: Vec<f64>, fisher_diag: Vec<f64>) -> Result<Self> {
        if theta_star.len() != fisher_diag.len() {
            return Err(Error::Shape {
                op: "ewc_state",
                lhs: vec![theta_star.len()],
                rhs: vec![fisher_diag.len()],
            });
        }
        if fisher_diag.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::Data("Fisher diagonal must be nonnegative".into()));
        }
        Ok(Self {
            theta_star,
            fisher_diag,
        })
    }

    pub fn from_model(model: &MlpModel, dataset: &GroupedDataset, best_indices: &[usize]) -> Result<Self> {
        Self::new(model.flat_params(), fisher_diag(model, dataset, best_indices)?)
    }
}

/// Empirical Fisher diagonal: the mean over `best_indices` of the squared
/// gradient of `log p(argmax | x)` with respect to every parameter.
///
/// Per-sample gradients are formed by a batched hand-written backward pass
/// through the MLP, so this does not go through the tape.
pub fn fisher_diag(model: &MlpModel, dataset: &GroupedDataset, best_indices: &[usize]) -> Result<Vec<f64>> {
    if best_indices.is_empty() {
        return Err(Error::DegeneratePartition(
            "Fisher estimation needs at least one best-group sample".into(),
        ));
    }
    let params = model.params();
    let layers = params.len() / 2;
    let mut acc: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();

    for chunk in best_indices.chunks(256) {
        let x = dataset.batch_features(chunk)?;
        // activations[l] is the input to layer l; pre[l] its pre-activation
        let mut activations = vec![x];
        let mut pre = Vec::with_capacity(layers);
        for l in 0..layers {
            let z = activations[l].matmul(&params[2 * l])?.add_bias(&params[2 * l + 1])?;
            if l + 1 < layers {
                activations.push(z.relu());
            }
            pre.push(z);
        }
        let logits = &pre[layers - 1];
        let probs = logits.softmax_temp(1.0)?;
        let top = logits.argmax_rows();
        let m = chunk.len();
        let c = logits.cols();
        let mut delta: Vec<f64> = probs.data().iter().map(|p| -p).collect();
        for (r, &k) in top.iter().enumerate() {
            delta[r * c + k] += 1.0;
        }
        let mut width = c;
        for l in (0..layers).rev() {
            let a = &activations[l];
            let fan_in = a.cols();
            let (fw, rest) = acc.split_at_mut(2 * l + 1);
            let fw = &mut fw[2 * l];
            let fb = &mut rest[0];
            for r in 0..m {
                let d = &delta[r * width..(r + 1) * width];
                let ar = a.row(r);
                for i in 0..fan_in {
                    let a2 = ar[i] * ar[i];
                    if a2 == 0.0 {
                        continue;
                    }
                    for j in 0..width {
                        fw[i * width + j] += a2 * d[j] * d[j];
                    }
                }
                for j in 0..width {
                    fb[j] += d[j] * d[j];
                }
            }
            if l > 0 {
                let w = &params[2 * l];
                let z = &pre[l - 1];
                let mut next = vec![0.0; m * fan_in];
                for r in 0..m {
                    let d = &delta[r * width..(r + 1) * width];
                    for i in 0..fan_in {
                        if z.row(r)[i] > 0.0 {
                            let wi = &w.data()[i * width..(i + 1) * width];
                            next[r * fan_in + i] = wi.iter().zip(d).map(|(a, b)| a * b).sum();
                        }
                    }
                }
                delta = next;
                width = fan_in;
            }
        }
    }
    let n = best_indices.len() as f64;
    Ok(acc.into_iter().flatten().map(|v| v / n).collect())
}

/// `(1/2) sum_j F_j (theta_j - theta*_j)^2` over the registered parameters.
pub fn loss_ewc(tape: &mut Tape, params: &[Var], state: &EwcState) -> Result<Var> {
    let total: usize = params.iter().map(|&p| tape.value(p).len()).sum();
    if total != state.theta_star.len() {
        return Err(Error::Shape {
            op: "loss_ewc",
            lhs: vec![total],
            rhs: vec![state.theta_star.len()],
        });
    }
    let mut offset = 0;
    let mut sum: Option<Var> = None;
    for &p in params {
        let shape = tape.value(p).shape().to_vec();
        let n = tape.value(p).len();
        let anchor = tape.constant(Tensor::new(shape.clone(), state.theta_star[offset..offset + n].to_vec())?);
        let fisher = tape.constant(Tensor::new(shape, state.fisher_diag[offset..offset + n].to_vec())?);
        offset += n;
        let diff = tape.sub(p, anchor)?;
        let sq = tape.square(diff);
        let weighted = tape.mul(sq, fisher)?;
        let s = tape.sum(weighted);
        sum = Some(match sum {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let sum = sum.ok_or_else(|| Error::Contract("loss_ewc needs at least one parameter".into()))?;
    Ok(tape.scale(sum, 0.5))
}

/// Plain evaluation of the EWC penalty at a flat parameter vector.
pub fn ewc_penalty(flat: &[f64], state: &EwcState) -> Result<f64> {
    if flat.len() != state.theta_star.len() {
        return Err(Error::Shape {
            op: "ewc_penalty",
            lhs: vec![flat.len()],
            rhs: vec![state.theta_star.len()],
        });
    }
    Ok(0.5
        * flat
            .iter()
            .zip(&state.theta_star)
            .zip(&state.fisher_diag)
            .map(|((t, s), f)| f * (t - s) * (t - s))
            .sum::<f64>())
}

/// `bm + lambda * cl`.
pub fn combine(tape: &mut Tape, bm: Var, cl: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Param(format!("lambda must be nonnegative, got {lambda}")));
    }
    let scaled = tape.scale(cl, lambda);
    tape.add(bm, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpConfig;

    fn scalar_loss(build: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = build(&mut tape);
        tape.value(v).item()
    }

    fn logits(tape: &mut Tape, rows: usize, data: &[f64]) -> Var {
        let cols = data.len() / rows;
        tape.leaf(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn erm_uniform_logits() {
        for y in [0, 1] {
            let v = scalar_loss(|t| {
                let l = logits(t, 1, &[0.0, 0.0]);
                loss_erm(t, l, &[y]).unwrap()
            });
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn erm_confident_and_hand_value() {
        let v = scalar_loss(|t| {
            let l = logits(t, 2, &[1000.0, -1000.0, -1000.0, 1000.0]);
            loss_erm(t, l, &[0, 1]).unwrap()
        });
        assert!(v.abs() < 1e-12);
        let v = scalar_loss(|t| {
            let l = logits(t, 1, &[1.0, 0.0]);
            loss_erm(t, l, &[0]).unwrap()
        });
        let e = 1.0f64.exp();
        assert!((v + (e / (e + 1.0)).ln()).abs() < 1e-15);
        assert!((v - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn erm_rejects_bad_label() {
        let mut t = Tape::new();
        let l = logits(&mut t, 1, &[0.0, 0.0]);
        assert!(loss_erm(&mut t, l, &[2]).is_err());
    }

    #[test]
    fn groupdro_equal_losses_keep_weights() {
        let s = GroupDroState {
            weights: vec![0.1, 0.2, 0.3, 0.4],
            eta: 0.7,
        };
        let next = s.updated(&[Some(1.3); 4]);
        for (a, b) in next.weights.iter().zip(&s.weights) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn groupdro_hand_step() {
        let s = GroupDroState {
            weights: vec![0.5, 0.5],
            eta: 1.0,
        };
        let next = s.updated(&[Some(1.0), Some(0.0)]);
        let e = 1.0f64.exp();
        assert!((next.weights[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((next.weights[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((next.weights[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn groupdro_absent_group_keeps_relative_weight() {
        let s = GroupDroState::uniform(3, 0.5);
        let next = s.updated(&[Some(1.0), None, Some(1.0)]);
        assert!(next.weights[1] < next.weights[0]);
        assert!((next.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn groupdro_degenerate_weights_pick_group_zero() {
        let state = GroupDroState {
            weights: vec![1.0, 0.0],
            eta: 0.1,
        };
        let mut t = Tape::new();
        let l = logits(&mut t, 3, &[0.2, -0.1, 1.0, 0.5, -0.3, 0.3]);
        let ce = per_sample_ce(&mut t, l, &[0, 1, 0]).unwrap();
        let per: Vec<f64> = t.value(ce).data().to_vec();
        let (loss, next) = loss_groupdro(&mut t, ce, &[0, 1, 0], &state).unwrap();
        assert_eq!(next.weights, vec![1.0, 0.0]);
        let g0 = (per[0] + per[2]) / 2.0;
        assert!((t.value(loss).item() - g0).abs() < 1e-15);
    }

    #[test]
    fn jtt_weights_definition() {
        assert_eq!(jtt_weights(&[1, 3], 6.0, 4).unwrap(), vec![1.0, 6.0, 1.0, 6.0]);
        assert!(jtt_weights(&[0], 0.5, 2).is_err());
    }

    #[test]
    fn jtt_identify_and_reductions() {
        // 1-d linear model predicting class 1 iff x > 0
        let cfg = MlpConfig {
            input_dim: 1,
            hidden_widths: vec![],
            num_classes: 2,
            init_seed: 0,
        };
        let mut m = MlpModel::zeros(cfg).unwrap();
        m.params_mut()[0].data_mut().copy_from_slice(&[-1.0, 1.0]);
        let ds = GroupedDataset::new(vec![-2.0, -1.0, 1.0, 2.0], 1, vec![0, 1, 1, 0], vec![0; 4], 1, 2)
            .unwrap();
        assert_eq!(jtt_identify(&m, &ds).unwrap(), vec![1, 3]);
        let perfect = GroupedDataset::new(vec![-2.0, 1.0], 1, vec![0, 1], vec![0, 0], 1, 2).unwrap();
        assert!(jtt_identify(&m, &perfect).unwrap().is_empty());

        let mut t = Tape::new();
        let l = logits(&mut t, 4, &[0.3, -0.2, 1.0, 0.1, -0.5, 0.5, 0.0, 2.0]);
        let ce = per_sample_ce(&mut t, l, &[0, 1, 1, 0]).unwrap();
        let erm = t.mean(ce);
        let w1 = weighted_mean(&mut t, ce, &jtt_weights(&[], 6.0, 4).unwrap()).unwrap();
        assert_eq!(t.value(w1).item(), t.value(erm).item());
        let w2 = weighted_mean(&mut t, ce, &jtt_weights(&[1, 3], 1.0, 4).unwrap()).unwrap();
        assert_eq!(t.value(w2).item(), t.value(erm).item());
    }

    #[test]
    fn lwf_closed_forms() {
        let kl = |target: [f64; 2], logit: [f64; 2]| {
            scalar_loss(|t| {
                let l = logits(t, 1, &logit);
                loss_lwf(t, l, &Tensor::matrix(1, 2, target.to_vec()).unwrap(), 1.0).unwrap()
            })
        };
        let v = kl([0.9, 0.1], [0.0, 0.0]);
        let exact = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((v - exact).abs() < 1e-14);
        assert!((v - 0.3681).abs() < 1e-4);
        assert!((kl([1.0, 0.0], [0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn lwf_shape_mismatch() {
        let mut t = Tape::new();
        let l = logits(&mut t, 1, &[0.0, 0.0, 0.0]);
        assert!(loss_lwf(&mut t, l, &Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn lwf_cache_from_zero_model() {
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_widths: vec![3],
            num_classes: 2,
            init_seed: 0,
        };
        let snap = MlpModel::zeros(cfg).unwrap().snapshot();
        let ds = GroupedDataset::new(vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0], 2, vec![0, 1, 1], vec![0, 0, 1], 2, 2)
            .unwrap();
        let cache = build_lwf_cache(&snap, &ds, &[0, 2], 3.0).unwrap();
        assert_eq!(cache.len(), 2);
        for (_, q) in cache.iter() {
            assert_eq!(q, &[0.5, 0.5]);
        }
        assert!(build_lwf_cache(&snap, &ds, &[], 1.0).is_err());

        // no cached rows in the batch: exactly zero
        let mut t = Tape::new();
        let l = logits(&mut t, 1, &[0.4, 0.1]);
        let z = cache.batch_loss(&mut t, l, &[1]).unwrap();
        assert_eq!(t.value(z).item(), 0.0);
    }

    #[test]
    fn ewc_hand_values() {
        let state = EwcState::new(vec![0.0, 0.0], vec![2.0, 0.0]).unwrap();
        assert_eq!(ewc_penalty(&[3.0, 5.0], &state).unwrap(), 9.0);
        assert_eq!(ewc_penalty(&[0.0, 0.0], &state).unwrap(), 0.0);
        let doubled = ewc_penalty(&[6.0, 10.0], &state).unwrap();
        assert_eq!(doubled, 36.0);
        assert!(ewc_penalty(&[1.0], &state).is_err());
        assert!(EwcState::new(vec![0.0], vec![-1.0]).is_err());

        let mut t = Tape::new();
        let p = t.leaf(Tensor::vector(vec![3.0, 5.0]));
        let v = loss_ewc(&mut t, &[p], &state).unwrap();
        assert_eq!(t.value(v).item(), 9.0);
    }

    #[test]
    fn combine_values() {
        let mut t = Tape::new();
        let bm = t.leaf(Tensor::scalar(1.0));
        let cl = t.leaf(Tensor::scalar(2.0));
        let c = combine(&mut t, bm, cl, 0.5).unwrap();
        assert_eq!(t.value(c).item(), 2.0);
        let z = combine(&mut t, bm, cl, 0.0).unwrap();
        assert_eq!(t.value(z).item(), 1.0);
        assert!(combine(&mut t, bm, cl, -1.0).is_err());
    }

    #[test]
    fn ewc_lambda_is_scaled() {
        assert_eq!(ClMethod::Ewc { lambda: 0.1 }.effective_lambda(), 100.0);
        assert_eq!(
            ClMethod::Lwf {
                temperature: 2.0,
                lambda: 0.1
            }
            .effective_lambda(),
            0.1
        );
    }

    #[test]
    fn method_names_and_validation() {
        let m = MethodSpec::new(BmMethod::GroupDro { eta: 0.01 }, ClMethod::Ewc { lambda: 1.0 });
        assert_eq!(m.to_string(), "GroupDRO-EWC");
        assert_eq!(MethodSpec::ERM.to_string(), "ERM");
        assert!(MethodSpec::new(BmMethod::Jtt { lambda_up: 0.5 }, ClMethod::None).validate().is_err());
        assert!(MethodSpec::new(
            BmMethod::ReSample,
            ClMethod::Lwf {
                temperature: 0.0,
                lambda: 1.0
            }
        )
        .validate()
        .is_err());
    }
}
