//! Generates the default spurious-correlation benchmark, splits it by
//! group and writes the splits as CSV.

use bmcl::datasets::{gen_spurious, save_csv, split, SpuriousConfig};
use bmcl::Result;

fn main() -> Result<()> {
    let cfg = SpuriousConfig::default();
    let ds = gen_spurious(&cfg)?;
    println!(
        "{} samples, {} features, groups (attribute * classes + label): {:?}",
        ds.len(),
        ds.dim(),
        ds.group_counts()
    );
    let agree = ds.labels().iter().zip(ds.attributes()).filter(|(y, a)| y == a).count();
    println!("attribute agrees with label on {:.1}% of samples", 100.0 * agree as f64 / ds.len() as f64);

    let parts = split(&ds, [0.7, 0.1, 0.2], 0)?;
    let dir = std::env::temp_dir().join("bmcl-spurious-example");
    std::fs::create_dir_all(&dir)?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        save_csv(part, dir.join(format!("{name}.csv")))?;
        println!("{name:>5}: {:>4} rows, per group {:?}", part.len(), part.group_counts());
    }
    println!("wrote {}", dir.display());
    Ok(())
}
