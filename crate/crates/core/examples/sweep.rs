//! A small config-driven sweep: run, report and a rho x lambda ablation,
//! all written under the system temp directory.

use bmcl::experiments::{cmd_ablate, cmd_report, cmd_run, ExperimentConfig, RunOptions};
use bmcl::Result;

const CONFIG: &str = r#"
seeds = [0, 1, 2]
workers = 2

[dataset.source.spurious]
n = 2000
p_corr = 0.95
core_gap = 1.5
spur_gap = 4.0
sigma = 1.0
noise_dims = 2
seed = 0

[train]
epochs = 20

[[methods]]
bm = "groupdro"

[[methods]]
bm = "groupdro"
cl = "lwf"
lambda = 1.0
"#;

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("bmcl-sweep-example");
    let mut cfg = ExperimentConfig::from_toml_str(CONFIG)?;

    let run_dir = root.join("run");
    let opts = RunOptions {
        out_dir: Some(run_dir.clone()),
        ..RunOptions::default()
    };
    let outcome = cmd_run(&cfg, &opts)?;
    println!("{} runs, {} failed", outcome.rows.len(), outcome.failures);
    print!("{}", cmd_report(&run_dir)?.table);

    cfg.grid = ExperimentConfig::from_toml_str(&format!("{CONFIG}\n[grid]\nrho = [0.1, 0.3]\nlambda = [0.0, 1.0, 10.0]\n"))?.grid;
    let ablate_dir = root.join("ablate");
    for m in cmd_ablate(
        &cfg,
        &RunOptions {
            out_dir: Some(ablate_dir.clone()),
            ..RunOptions::default()
        },
    )? {
        println!("\n{} (mean test accuracy at the ERM best / worst groups)", m.method);
        for (i, rho) in m.rhos.iter().enumerate() {
            let cells: Vec<String> = m.best[i]
                .iter()
                .zip(&m.worst[i])
                .map(|(b, w)| format!("{:.3}/{:.3}", b.unwrap_or(f64::NAN), w.unwrap_or(f64::NAN)))
                .collect();
            println!("rho {rho}: {}", cells.join("  "));
        }
        println!("written to {}", ablate_dir.join(m.file_name()).display());
    }
    Ok(())
}
