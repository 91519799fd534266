//! Trains an ERM baseline, shows the per-group validation accuracies and
//! the best/worst partition around their mean, and round-trips the model
//! through a checkpoint.

use bmcl::datasets::{gen_spurious, split, SpuriousConfig};
use bmcl::metrics::pct;
use bmcl::model::MlpModel;
use bmcl::trainer::{evaluate, partition_groups, train_baseline_bm, DataSplits, TrainConfig};
use bmcl::Result;

fn main() -> Result<()> {
    let parts = split(&gen_spurious(&SpuriousConfig::default())?, [0.7, 0.1, 0.2], 0)?;
    let data = DataSplits {
        train: parts.train,
        val: parts.val,
        test: parts.test,
    };
    let run = train_baseline_bm(&data, &TrainConfig::default())?;
    for r in &run.history {
        println!(
            "epoch {:>2}  loss {:.4}  val worst {}  balanced {}",
            r.epoch,
            r.mean_loss,
            pct(r.val_worst_acc),
            pct(r.val_balanced_acc)
        );
    }
    println!("selected epoch {}", run.history[run.selected_epoch].epoch);

    let p = partition_groups(&run.model, &data.val)?;
    let alpha: Vec<String> = p.alpha.iter().map(|a| pct(*a)).collect();
    println!("val accuracy per group {alpha:?}, tau {}", pct(p.tau));
    println!("best groups {:?}, worst groups {:?}", p.best, p.worst);

    let path = std::env::temp_dir().join("bmcl-erm.ckpt");
    run.model.save_checkpoint(&path)?;
    let back = MlpModel::load_checkpoint(&path)?;
    assert_eq!(evaluate(&back, &data.test)?, run.test_metrics);
    println!("checkpoint {} reproduces the test metrics", path.display());
    Ok(())
}
