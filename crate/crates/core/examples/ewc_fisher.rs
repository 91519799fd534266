//! Empirical Fisher diagonal of an ERM model on its best groups, the EWC
//! penalty it induces, and a ReSample-EWC run.

use bmcl::datasets::{gen_spurious, split, SpuriousConfig};
use bmcl::methods::{ewc_penalty, BmMethod, ClMethod, EwcState, MethodSpec, EWC_LAMBDA_SCALE};
use bmcl::metrics::pct;
use bmcl::model::MlpModel;
use bmcl::trainer::{partition_groups, train_bmcl, train_erm, DataSplits, TrainConfig};
use bmcl::Result;

fn main() -> Result<()> {
    let parts = split(&gen_spurious(&SpuriousConfig::default())?, [0.7, 0.1, 0.2], 0)?;
    let data = DataSplits {
        train: parts.train,
        val: parts.val,
        test: parts.test,
    };
    let cfg = TrainConfig {
        method: MethodSpec::new(BmMethod::ReSample, ClMethod::Ewc { lambda: 1.0 }),
        ..TrainConfig::default()
    };
    let init = MlpModel::init(cfg.model_config(&data))?;
    let anchor = train_erm(init, &data.train, &data.val, &cfg, cfg.stage1_epochs())?.model;
    let partition = partition_groups(&anchor, &data.val)?;
    let best = data.train.indices_in_groups(&partition.best);
    let state = EwcState::from_model(&anchor, &data.train, &best)?;

    let mut f = state.fisher_diag.clone();
    f.sort_by(|a, b| b.total_cmp(a));
    println!("{} parameters, {} best-group samples", f.len(), best.len());
    println!("largest Fisher entries {:?}", &f[..5]);
    let shifted: Vec<f64> = state.theta_star.iter().map(|t| t + 0.01).collect();
    println!(
        "penalty at anchor {}, after shifting every weight by 0.01: {:.3e} (x{EWC_LAMBDA_SCALE} x lambda in the loss)",
        ewc_penalty(&state.theta_star, &state)?,
        ewc_penalty(&shifted, &state)?
    );

    let run = train_bmcl(&data, &cfg)?;
    let accs: Vec<String> = run.test_metrics.per_group_acc.iter().map(|a| pct(*a)).collect();
    println!("{} test accuracy per group {accs:?}", cfg.method);
    Ok(())
}
