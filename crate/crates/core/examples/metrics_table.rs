//! Group metrics and leveling-down / worst-group improvement computed
//! from the published Waterbirds subgroup accuracies, rendered as a table.

use bmcl::experiments::report::{build_report, render_table};
use bmcl::experiments::runner::join_accs;
use bmcl::experiments::{ReportRow, RunStatus};
use bmcl::metrics::GroupMetrics;
use bmcl::Result;

fn row(method: &str, accs: &[f64]) -> Result<ReportRow> {
    let accs: Vec<f64> = accs.iter().map(|a| a / 100.0).collect();
    let m = GroupMetrics::from_group_accuracies(accs.clone(), accs.iter().sum::<f64>() / accs.len() as f64)?;
    Ok(ReportRow {
        method: method.into(),
        seed: 0,
        rho: None,
        lambda: None,
        status: RunStatus::Ok,
        error: String::new(),
        global_acc: Some(m.global_acc),
        balanced_acc: Some(m.balanced_acc),
        best_group: Some(m.best_group),
        best_acc: Some(m.best_acc),
        worst_group: Some(m.worst_group),
        worst_acc: Some(m.worst_acc),
        disparity: Some(m.disparity),
        group_accs: join_accs(&accs),
        ref_best_group: None,
        ref_worst_group: None,
        lde: None,
        iw: None,
        selected_epoch: None,
        stage1_epochs: None,
    })
}

fn main() -> Result<()> {
    // groups: landbird/land, waterbird/land, landbird/water, waterbird/water
    let rows = vec![
        row("ERM", &[99.5, 72.8, 79.6, 94.5])?,
        row("GroupDRO", &[98.6, 82.6, 86.3, 93.2])?,
        row("ReSample", &[94.9, 85.5, 87.3, 91.1])?,
        row("JTT", &[96.2, 83.5, 81.6, 93.3])?,
        row("GroupDRO-LwF", &[99.0, 81.6, 82.2, 94.5])?,
        row("ReSample-LwF", &[99.3, 79.5, 81.4, 94.9])?,
    ];
    let report = build_report(&rows)?;
    print!("{}", render_table(&report.summaries));
    Ok(())
}
