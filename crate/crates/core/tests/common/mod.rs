//! Oracles shared by the integration and acceptance tests: central finite
//! differences over the flat parameter vector and a per-sample tape
//! Fisher estimate.

#![allow(dead_code)]

use bmcl::datasets::{gen_spurious, GroupedDataset, SpuriousConfig};
use bmcl::model::{MlpConfig, MlpModel};
use bmcl::tensor::{Tape, Tensor, Var};
use bmcl::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn tiny_data(n: usize, seed: u64) -> GroupedDataset {
    gen_spurious(&SpuriousConfig {
        n,
        p_corr: 0.8,
        noise_dims: 4,
        seed,
        ..SpuriousConfig::default()
    })
    .unwrap()
}

/// One hidden layer of 16 units on 6 inputs: 146 parameters.
pub fn two_layer(seed: u64) -> MlpModel {
    MlpModel::init(MlpConfig {
        input_dim: 6,
        hidden_widths: vec![16],
        num_classes: 2,
        init_seed: seed,
    })
    .unwrap()
}

/// Builds a scalar loss from registered parameters and the logits of `x`.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var], Var) -> Result<Var> + 'a;

pub fn loss_and_grad(model: &MlpModel, x: &Tensor, loss: &LossFn<'_>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let xv = tape.constant(x.clone());
    let logits = model.forward_on(&mut tape, &params, xv).unwrap();
    let out = loss(&mut tape, &params, logits).unwrap();
    let grads = tape.backward(out).unwrap();
    let flat = params.iter().flat_map(|&p| grads.get(p).into_data()).collect();
    (tape.value(out).item(), flat)
}

fn loss_at(model: &MlpModel, flat: &[f64], x: &Tensor, loss: &LossFn<'_>) -> f64 {
    let mut m = model.clone();
    m.set_flat_params(flat).unwrap();
    loss_and_grad(&m, x, loss).0
}

/// Sign pattern of every hidden pre-activation.
fn relu_pattern(model: &MlpModel, flat: &[f64], x: &Tensor) -> Vec<bool> {
    let mut m = model.clone();
    m.set_flat_params(flat).unwrap();
    let params = m.params();
    let layers = params.len() / 2;
    let mut a = x.clone();
    let mut pattern = Vec::new();
    for l in 0..layers - 1 {
        let z = a.matmul(&params[2 * l]).unwrap().add_bias(&params[2 * l + 1]).unwrap();
        pattern.extend(z.data().iter().map(|&v| v > 0.0));
        a = z.relu();
    }
    pattern
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, min_coords: usize, tol: f64) -> bool {
        self.checked >= min_coords && self.max_rel_err <= tol
    }
}

/// Compares tape gradients against central differences on `coords`
/// random coordinates (all of them if fewer exist). Coordinates whose
/// perturbation flips a ReLU are skipped; replacements are drawn from the
/// remaining coordinates until `coords` have been checked or none remain.
pub fn grad_check(model: &MlpModel, x: &Tensor, loss: &LossFn<'_>, coords: usize, seed: u64) -> GradCheck {
    let (_, analytic) = loss_and_grad(model, x, loss);
    let theta = model.flat_params();
    let base = relu_pattern(model, &theta, x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, theta.len(), theta.len()).into_vec();
    let mut report = GradCheck {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for j in order {
        if report.checked == coords {
            break;
        }
        let mut plus = theta.clone();
        plus[j] += FD_STEP;
        let mut minus = theta.clone();
        minus[j] -= FD_STEP;
        if relu_pattern(model, &plus, x) != base || relu_pattern(model, &minus, x) != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (loss_at(model, &plus, x, loss) - loss_at(model, &minus, x, loss)) / (2.0 * FD_STEP);
        let a = analytic[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((j, a, numeric));
        }
        report.checked += 1;
    }
    report
}

/// Mean over `rows` of the squared gradient of `log p(argmax | x)`, one
/// tape per sample.
pub fn fisher_oracle(model: &MlpModel, ds: &GroupedDataset, rows: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; model.param_count()];
    for &i in rows {
        let x = ds.batch_features(&[i]).unwrap();
        let pred = model.predict(&x).unwrap()[0];
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let xv = tape.constant(x);
        let logits = model.forward_on(&mut tape, &params, xv).unwrap();
        let logp = tape.log_softmax_temp(logits, 1.0).unwrap();
        let picked = tape.gather(logp, &[pred]).unwrap();
        let out = tape.sum(picked);
        let grads = tape.backward(out).unwrap();
        let flat: Vec<f64> = params.iter().flat_map(|&p| grads.get(p).into_data()).collect();
        for (a, g) in acc.iter_mut().zip(flat) {
            *a += g * g;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// Gradient checks of every training objective on a 2-layer MLP: ERM,
/// GroupDRO with its current weights, JTT weighting, LwF (direct and
/// cached), EWC and the two combined forms.
pub fn check_all_losses(coords: usize) -> Vec<(&'static str, GradCheck)> {
    use bmcl::methods::*;

    let ds = tiny_data(40, 11);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let x = ds.feature_matrix().unwrap();
    let labels = ds.labels().to_vec();
    let gids = ds.group_ids().to_vec();
    let model = two_layer(5);
    let teacher = two_layer(77);
    let temperature = 2.0;

    let per_sample: Vec<f64> = {
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = model.forward_on(&mut tape, &params, xv).unwrap();
        let ce = per_sample_ce(&mut tape, logits, &labels).unwrap();
        tape.value(ce).data().to_vec()
    };
    let dro = GroupDroState::uniform(ds.num_groups(), 0.5).updated(&group_mean_losses(
        &per_sample,
        &gids,
        ds.num_groups(),
    ));
    let jtt = jtt_weights(&jtt_identify(&model, &ds).unwrap(), 5.0, ds.len()).unwrap();
    let targets = teacher.forward(&x).unwrap().softmax_temp(temperature).unwrap();
    let cached: Vec<usize> = rows.iter().copied().filter(|i| i % 3 != 0).collect();
    let cache = build_lwf_cache(&teacher.snapshot(), &ds, &cached, temperature).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = model.flat_params();
    let ewc = EwcState::new(
        theta.iter().map(|t| t + rand::Rng::random_range(&mut rng, -0.5..0.5)).collect(),
        theta.iter().map(|_| rand::Rng::random_range(&mut rng, 0.0..2.0)).collect(),
    )
    .unwrap();

    let dro_w = dro.weights.clone();
    let checks: Vec<(&'static str, Box<LossFn<'_>>)> = vec![
        ("ERM", Box::new(|t: &mut Tape, _: &[Var], z: Var| loss_erm(t, z, &labels))),
        (
            "GroupDRO-weighted",
            Box::new(|t: &mut Tape, _: &[Var], z: Var| {
                let ce = per_sample_ce(t, z, &labels)?;
                groupdro_objective(t, ce, &gids, &dro_w)
            }),
        ),
        (
            "JTT-weighted",
            Box::new(|t: &mut Tape, _: &[Var], z: Var| {
                let ce = per_sample_ce(t, z, &labels)?;
                weighted_mean(t, ce, &jtt)
            }),
        ),
        ("LwF", Box::new(|t: &mut Tape, _: &[Var], z: Var| loss_lwf(t, z, &targets, temperature))),
        ("LwF-cached", Box::new(|t: &mut Tape, _: &[Var], z: Var| cache.batch_loss(t, z, &rows))),
        ("EWC", Box::new(|t: &mut Tape, p: &[Var], _: Var| loss_ewc(t, p, &ewc))),
        (
            "GroupDRO+LwF",
            Box::new(|t: &mut Tape, _: &[Var], z: Var| {
                let ce = per_sample_ce(t, z, &labels)?;
                let bm = groupdro_objective(t, ce, &gids, &dro_w)?;
                let cl = cache.batch_loss(t, z, &rows)?;
                combine(t, bm, cl, 0.7)
            }),
        ),
        (
            "JTT+EWC",
            Box::new(|t: &mut Tape, p: &[Var], z: Var| {
                let ce = per_sample_ce(t, z, &labels)?;
                let bm = weighted_mean(t, ce, &jtt)?;
                let cl = loss_ewc(t, p, &ewc)?;
                combine(t, bm, cl, ClMethod::Ewc { lambda: 0.3 }.effective_lambda())
            }),
        ),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(k, (name, f))| (*name, grad_check(&model, &x, f.as_ref(), coords, 100 + k as u64)))
        .collect()
}
