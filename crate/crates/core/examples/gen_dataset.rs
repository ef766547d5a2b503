//! Writes a small synthetic trial set to disk and reads it back.
//!
//! cargo run --release --example gen_dataset [out_dir]

use csngf::eval::{read_dataset, write_dataset, DatasetSpec};

fn main() -> csngf::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("csngf_smoke").display().to_string());
    let spec = DatasetSpec::smoke_preset();
    let manifest = write_dataset(&spec, &dir)?;
    for entry in &manifest.trials {
        let gt = &entry.ground_truth;
        println!(
            "trial {}: euler {:>7.2?} shift {:?} -> {}",
            entry.index, gt.euler_deg, gt.translation_vx, entry.reference
        );
    }
    let cases = read_dataset(&dir)?;
    println!("{} trials of {} in {dir}", cases.len(), spec.block);
    Ok(())
}
