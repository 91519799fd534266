mod common;

use bmcl::tensor::Tape;
use common::{check_all_losses, loss_and_grad, tiny_data, two_layer};

#[test]
fn every_objective_matches_central_differences() {
    for (name, report) in check_all_losses(120) {
        assert!(
            report.passes(100, 1e-4),
            "{name}: checked {} (skipped {} kinks), max relative error {:.3e} at {:?}",
            report.checked,
            report.skipped_kinks,
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn combined_gradient_is_linear_in_lambda() {
    use bmcl::methods::{build_lwf_cache, combine, loss_erm};
    let ds = tiny_data(30, 2);
    let x = ds.feature_matrix().unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let model = two_layer(1);
    let cache = build_lwf_cache(&two_layer(9).snapshot(), &ds, &rows, 3.0).unwrap();
    let grad = |lambda: f64| {
        loss_and_grad(&model, &x, &|t: &mut Tape, _, z| {
            let bm = loss_erm(t, z, ds.labels())?;
            let cl = cache.batch_loss(t, z, &rows)?;
            combine(t, bm, cl, lambda)
        })
    };
    let (l0, g0) = grad(0.0);
    let (l1, g1) = grad(1.0);
    let (l2, g2) = grad(2.0);
    assert!((l2 - 2.0 * l1 + l0).abs() < 1e-12);
    for j in 0..g0.len() {
        assert!((g2[j] - 2.0 * g1[j] + g0[j]).abs() < 1e-12);
    }
}
