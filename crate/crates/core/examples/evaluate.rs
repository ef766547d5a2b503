//! Runs every search variant on a few reduced-range trials and prints the
//! per-variant success counts and the cumulative success curve.
//!
//! cargo run --release --example evaluate [trials]

use csngf::eval::{run_trials, DatasetSpec, TrialCase, Variant, SUCCESS_THRESHOLD_VX};
use csngf::search::{PyramidConfig, SearchConfig};
use csngf::xcorr::FftEngine;

fn main() -> csngf::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = DatasetSpec { trials, ..DatasetSpec::reduced_preset() };
    let cases: Vec<TrialCase> = (0..trials).map(|i| spec.make(i)).collect::<csngf::Result<_>>()?;
    let pyramid = PyramidConfig::default().scaled_for(spec.block.len());
    let eval = run_trials(
        &FftEngine::new(),
        &cases,
        &pyramid,
        &SearchConfig::default(),
        &Variant::ALL,
        SUCCESS_THRESHOLD_VX,
    )?;
    for r in &eval.records {
        println!("trial {} {:>18}: d_E = {:6.2} vx ({:.1} s)", r.trial, r.variant, r.d_e, r.time_s);
    }
    for v in Variant::ALL {
        println!("{v:>18}: {}/{trials} below {SUCCESS_THRESHOLD_VX} vx", eval.successes(v));
    }
    println!("t      {}", Variant::ALL.map(|v| format!("{v:>18}")).join(""));
    for (t, fractions) in eval.cumulative().into_iter().filter(|(t, _)| t.fract() == 0.0) {
        let cols: String = fractions.iter().map(|f| format!("{f:>18.2}")).collect();
        println!("{t:<6} {cols}");
    }
    Ok(())
}
