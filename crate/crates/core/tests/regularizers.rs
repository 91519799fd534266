mod common;

use bmcl::methods::{build_lwf_cache, ewc_penalty, fisher_diag, loss_ewc, loss_lwf, EwcState};
use bmcl::tensor::Tape;
use common::{fisher_oracle, loss_and_grad, tiny_data, two_layer};

#[test]
fn ewc_vanishes_with_zero_gradient_at_anchor() {
    let ds = tiny_data(50, 4);
    let model = two_layer(2);
    let rows: Vec<usize> = (0..25).collect();
    let state = EwcState::from_model(&model, &ds, &rows).unwrap();
    let x = ds.feature_matrix().unwrap();
    let (value, grad) = loss_and_grad(&model, &x, &|t: &mut Tape, p, _| loss_ewc(t, p, &state));
    assert!(value.abs() <= 1e-12);
    assert!(grad.iter().all(|g| g.abs() <= 1e-12));
    assert_eq!(ewc_penalty(&model.flat_params(), &state).unwrap(), 0.0);
}

#[test]
fn ewc_tape_matches_closed_form_away_from_anchor() {
    let ds = tiny_data(50, 4);
    let model = two_layer(2);
    let rows: Vec<usize> = (0..50).collect();
    let state = EwcState::from_model(&model, &ds, &rows).unwrap();
    let moved = two_layer(3);
    let x = ds.feature_matrix().unwrap();
    let (value, grad) = loss_and_grad(&moved, &x, &|t: &mut Tape, p, _| loss_ewc(t, p, &state));
    let flat = moved.flat_params();
    let expected = ewc_penalty(&flat, &state).unwrap();
    assert!((value - expected).abs() <= 1e-12 * expected.max(1.0));
    for j in 0..flat.len() {
        let g = state.fisher_diag[j] * (flat[j] - state.theta_star[j]);
        assert!((grad[j] - g).abs() <= 1e-12);
    }
}

#[test]
fn lwf_vanishes_against_own_snapshot() {
    let ds = tiny_data(60, 6);
    let model = two_layer(8);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let x = ds.feature_matrix().unwrap();
    for temperature in [0.5, 1.0, 2.0, 4.0] {
        let cache = build_lwf_cache(&model.snapshot(), &ds, &rows, temperature).unwrap();
        let (value, _) = loss_and_grad(&model, &x, &|t: &mut Tape, _, z| cache.batch_loss(t, z, &rows));
        assert!(value.abs() <= 1e-9, "T = {temperature}: {value}");
        let targets = model.forward(&x).unwrap().softmax_temp(temperature).unwrap();
        let (direct, _) = loss_and_grad(&model, &x, &|t: &mut Tape, _, z| loss_lwf(t, z, &targets, temperature));
        assert!(direct.abs() <= 1e-9);
    }
}

#[test]
fn fisher_matches_per_sample_oracle() {
    let ds = tiny_data(300, 12);
    for seed in 0..3 {
        let model = two_layer(seed);
        // more than one internal chunk
        let rows: Vec<usize> = (0..ds.len()).filter(|i| i % 7 != 3).collect();
        let fast = fisher_diag(&model, &ds, &rows).unwrap();
        let oracle = fisher_oracle(&model, &ds, &rows);
        assert!(fast.iter().all(|&f| f >= 0.0));
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn fisher_deeper_network() {
    use bmcl::model::{MlpConfig, MlpModel};
    let ds = tiny_data(80, 1);
    let model = MlpModel::init(MlpConfig {
        input_dim: 6,
        hidden_widths: vec![7, 5],
        num_classes: 2,
        init_seed: 4,
    })
    .unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let fast = fisher_diag(&model, &ds, &rows).unwrap();
    let oracle = fisher_oracle(&model, &ds, &rows);
    for (a, b) in fast.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-10);
    }
}
