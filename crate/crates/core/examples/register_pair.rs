//! Registers a synthetic multimodal pair with a known rigid displacement
//! and reports how far the recovered transform is from the truth.
//!
//! cargo run --release --example register_pair [seed]

use csngf::eval::{corner_error, gen_phantom_pair, make_trial, PhantomSpec, TrialSpec};
use csngf::search::{global_search, PyramidConfig, SearchConfig};
use csngf::volume::{Dims, Interpolation};
use csngf::xcorr::FftEngine;

fn main() -> csngf::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let (a, b) = gen_phantom_pair(&PhantomSpec { seed, ..PhantomSpec::default() })?;
    let block = Dims::cube(64);
    let trial = make_trial(
        &a,
        &b,
        &TrialSpec {
            rotation_deg: [30.0; 3],
            shift_vx: [15; 3],
            block,
            interpolation: Interpolation::Tricubic,
            seed,
        },
    )?;

    let pyramid = PyramidConfig::default().scaled_for(block.len());
    println!("schedule: a = {:?}", pyramid.a);
    let result = global_search(
        &FftEngine::new(),
        (&trial.reference, &trial.reference_mask),
        (&trial.floating, &trial.floating_mask),
        &pyramid,
        &SearchConfig { seed, ..SearchConfig::default() },
    )?;

    let gt = &trial.ground_truth;
    let rec = &result.transform;
    println!("truth     euler {:>8.2?}  shift {:?}", gt.euler_deg, gt.translation_vx);
    println!("recovered euler {:>8.2?}  shift {:?}", rec.euler_deg, rec.translation_vx);
    for level in &result.per_level {
        println!(
            "  level {} (1/{}): {} rotations, best {:.4}, {:.2} s",
            level.level + 1,
            level.factor,
            level.evaluated,
            level.best[0].score,
            level.time_s
        );
    }
    println!(
        "corner error {:.2} vx, score {:.4}, {:.2} s",
        corner_error(gt, rec, block),
        result.score,
        result.wall_time_s
    );
    Ok(())
}
