//! Two-stage training: ERM pretraining for a fifth of the budget, then
//! GroupDRO fine-tuning with LwF distillation on the best groups, compared
//! with plain GroupDRO and ERM on the test split.

use bmcl::datasets::{gen_spurious, split, SpuriousConfig};
use bmcl::methods::{BmMethod, ClMethod, MethodSpec};
use bmcl::metrics::{compute_relative, pct};
use bmcl::trainer::{train, DataSplits, Stage, TrainConfig};
use bmcl::Result;

fn main() -> Result<()> {
    let parts = split(&gen_spurious(&SpuriousConfig::default())?, [0.7, 0.1, 0.2], 0)?;
    let data = DataSplits {
        train: parts.train,
        val: parts.val,
        test: parts.test,
    };
    let dro = BmMethod::GroupDro { eta: 0.01 };
    let methods = [
        MethodSpec::ERM,
        MethodSpec::new(dro, ClMethod::None),
        MethodSpec::new(
            dro,
            ClMethod::Lwf {
                temperature: 2.0,
                lambda: 1.0,
            },
        ),
    ];
    let mut erm = None;
    for method in methods {
        let run = train(&data, &TrainConfig { method, ..TrainConfig::default() })?;
        let m = &run.test_metrics;
        let reference = erm.get_or_insert_with(|| m.clone());
        let rel = compute_relative(m, reference)?;
        let accs: Vec<String> = m.per_group_acc.iter().map(|a| pct(*a)).collect();
        println!(
            "{method:<13} groups {accs:?}  worst {}  LDE {}  IW {}",
            pct(m.worst_acc),
            pct(rel.lde),
            pct(rel.iw)
        );
        if let Some(p) = &run.partition {
            let pretrain = run.history.iter().filter(|r| r.stage == Stage::Pretrain).count();
            println!(
                "{:13} {pretrain} pretraining epochs, best groups {:?}, selected epoch {}",
                "",
                p.best,
                run.selected_epoch + 1
            );
        }
    }
    Ok(())
}
