//! Compares the frequency-domain similarity map with the nested-loop
//! evaluation on random masked inputs and prints the largest deviation.
//!
//! cargo run --release --example oracle_check [instances]

use csngf::csngf::{csngf_map_direct, similarity_map_fft};
use csngf::ngf::{ngf, Measure, NgfConfig};
use csngf::volume::{Dims, Mask, Volume};
use csngf::xcorr::FftEngine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> csngf::Result<()> {
    let instances = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let engine = FftEngine::new();
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut side = || rng.gen_range(6..=14);
        let (da, db) = (Dims::new(side(), side(), side()), Dims::new(side(), side(), side()));
        let mut random_volume = |d: Dims| Volume::from_fn(d, |_, _, _| rng.gen_range(0.0..1.0));
        let (a, b) = (random_volume(da), random_volume(db));
        let mut random_mask = |d: Dims| Mask::from_fn(d, |_, _, _| rng.gen_bool(0.7));
        let (ma, mb) = (random_mask(da)?, random_mask(db)?);
        let cfg = NgfConfig::default();
        let (na, nb) = (ngf(&a, &ma, cfg)?, ngf(&b, &mb, cfg)?);

        for measure in [Measure::Squared, Measure::Unsquared] {
            let fast = similarity_map_fft(&engine, &na, &ma, &nb, &mb, 0.5, measure)?;
            let slow = csngf_map_direct(&na, &ma, &nb, &mb, 0.5, measure)?;
            let mut worst = 0.0f64;
            for (chi, s) in slow.valid_entries() {
                let f = fast.score(chi).expect("same validity");
                worst = worst.max((f - s).abs());
            }
            println!(
                "seed {seed}: {da} vs {db} {measure:>9}: {} valid shifts, max |fft - direct| = {worst:.2e}",
                slow.valid_count()
            );
        }
    }
    Ok(())
}
