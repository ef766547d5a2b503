//! Computes the similarity map over every integer shift between two volumes
//! of different modality, for both pointwise measures, and shows what
//! contrast inversion does to each.
//!
//! cargo run --release --example similarity_map

use csngf::csngf::{argmax_displacement, similarity_map_fft, DEFAULT_GAMMA};
use csngf::eval::{gen_phantom_pair, PhantomSpec};
use csngf::ngf::{ngf, Measure, NgfConfig};
use csngf::volume::{Dims, Mask};
use csngf::xcorr::FftEngine;

fn main() -> csngf::Result<()> {
    let spec = PhantomSpec {
        dims: Dims::cube(48),
        head_radius: [14.0, 12.0, 10.0],
        blob_radius: [2.0, 4.5],
        ..PhantomSpec::default()
    };
    let (a, b) = gen_phantom_pair(&spec)?;
    // the floating image sees the anatomy 4 voxels further along x
    let shift = [4usize, 0, 0];
    let block = Dims::cube(36);
    let reference = a.crop([6; 3], block)?;
    let floating = b.crop([6 + shift[0], 6, 6], block)?;
    let mask = Mask::full(block);

    let cfg = NgfConfig::default();
    let engine = FftEngine::new();
    let na = ngf(&reference, &mask, cfg)?;
    let nb = ngf(&floating, &mask, cfg)?;
    let nb_inverted = ngf(&floating.negated(), &mask, cfg)?;

    for measure in [Measure::Squared, Measure::Unsquared] {
        let map = similarity_map_fft(&engine, &na, &mask, &nb, &mask, DEFAULT_GAMMA, measure)?;
        let inv = similarity_map_fft(&engine, &na, &mask, &nb_inverted, &mask, DEFAULT_GAMMA, measure)?;
        let (chi, score) = argmax_displacement(&map)?;
        let (chi_inv, score_inv) = argmax_displacement(&inv)?;
        println!(
            "{measure:>9}: {} valid shifts of {}, peak at {chi:?} ({score:.4}); inverted floating peaks at {chi_inv:?} ({score_inv:.4})",
            map.valid_count(),
            map.len(),
        );
    }
    println!("the true shift is {:?}", shift.map(|s| -(s as i64)));
    Ok(())
}
