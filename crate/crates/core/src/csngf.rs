//! Masked cross-similarity of normalized gradient fields for every integer
//! displacement.
//!
//! For displacement `χ` the similarity is
//!
//! ```text
//! CSNGF(χ) = 1/N(χ) Σ_x M_A(x) M_B(x+χ) s(ñ_A(x), ñ_B(x+χ))
//! ```
//!
//! with `N(χ)` the number of overlapping mask voxels. Expanding the squared
//! dot product gives six separable products (`ñ_i²` and `ñ_i ñ_j`, the
//! latter weighted by 2), each a plain cross-correlation. All six are summed
//! in the frequency domain, so one map costs 14 forward transforms (6
//! component grids plus the mask, per image) and 2 inverse transforms. The
//! unsquared variant needs only the three raw components.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ngf::{Measure, VectorField};
use crate::volume::{
    ensure_same_dims, payload_names, read_bytes, sibling, write_bytes, Dims, Mask, RawHeader,
    ORDER_X_FASTEST,
};
use crate::xcorr::{padded_dims, CorrelationGrid, FftEngine, Spectrum};

/// Largest distance of a mask correlation from an integer before it is
/// treated as a transform failure.
pub const OVERLAP_ROUNDING_TOLERANCE: f64 = 1e-3;

/// Default minimum-overlap fraction.
pub const DEFAULT_GAMMA: f64 = 0.5;

const SQUARED_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
const UNSQUARED_WEIGHTS: [f64; 3] = [1.0, 1.0, 1.0];

/// The six masked product grids `ñ1², ñ2², ñ3², ñ1ñ2, ñ1ñ3, ñ2ñ3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentImages {
    dims: Dims,
    grids: [Vec<f64>; 6],
}

impl ComponentImages {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn grids(&self) -> &[Vec<f64>; 6] {
        &self.grids
    }
}

/// Components of `n` zeroed outside the mask.
pub fn masked_components(n: &VectorField, m: &Mask) -> Result<[Vec<f64>; 3]> {
    ensure_same_dims(n.dims(), m.dims(), "masked components")?;
    Ok(std::array::from_fn(|a| {
        n.component(a)
            .iter()
            .zip(m.bits())
            .map(|(&v, &on)| if on { v } else { 0.0 })
            .collect()
    }))
}

pub fn component_images(n: &VectorField, m: &Mask) -> Result<ComponentImages> {
    let [c1, c2, c3] = masked_components(n, m)?;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    Ok(ComponentImages {
        dims: n.dims(),
        grids: [
            prod(&c1, &c1),
            prod(&c2, &c2),
            prod(&c3, &c3),
            prod(&c1, &c2),
            prod(&c1, &c3),
            prod(&c2, &c3),
        ],
    })
}

fn mask_grid(m: &Mask) -> Vec<f64> {
    m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn feature_grids(n: &VectorField, m: &Mask, measure: Measure) -> Result<Vec<Vec<f64>>> {
    Ok(match measure {
        Measure::Squared => component_images(n, m)?.grids.into_iter().collect(),
        Measure::Unsquared => masked_components(n, m)?.into_iter().collect(),
    })
}

fn measure_weights(measure: Measure) -> &'static [f64] {
    match measure {
        Measure::Squared => &SQUARED_WEIGHTS,
        Measure::Unsquared => &UNSQUARED_WEIGHTS,
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must be in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// Similarity and overlap over the displacement lattice.
///
/// The lattice spans `χ ∈ [-(nA-1), nB-1]` per axis for reference dims `nA`
/// and floating dims `nB`. Scores exist only where `N(χ) >= γ · max N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    lattice: Dims,
    origin: [usize; 3],
    // NaN marks an invalid displacement; real scores are always finite.
    scores: Vec<f64>,
    // UNCOUNTED marks a displacement the direct method skipped.
    overlap: Vec<u64>,
    max_overlap: u64,
    gamma: f64,
    measure: Measure,
    padded: Option<Dims>,
}

const UNCOUNTED: u64 = u64::MAX;

impl SimilarityMap {
    /// Turns per-displacement numerators into scores in place.
    fn build(
        lattice: Dims,
        origin: [usize; 3],
        overlap: Vec<u64>,
        mut scores: Vec<f64>,
        gamma: f64,
        measure: Measure,
        padded: Option<Dims>,
    ) -> Result<Self> {
        let max_overlap = overlap
            .iter()
            .copied()
            .filter(|&n| n != UNCOUNTED)
            .max()
            .unwrap_or(0);
        let threshold = gamma * max_overlap as f64;
        let mut any_valid = false;
        for (s, &n) in scores.iter_mut().zip(&overlap) {
            if n != UNCOUNTED && n >= 1 && n as f64 >= threshold {
                let v = *s / n as f64;
                *s = match measure {
                    // sums of squares; only rounding can push them below 0
                    Measure::Squared => v.max(0.0),
                    Measure::Unsquared => v,
                };
                any_valid = true;
            } else {
                *s = f64::NAN;
            }
        }
        if !any_valid {
            return Err(Error::NoValidDisplacements);
        }
        Ok(SimilarityMap {
            lattice,
            origin,
            scores,
            overlap,
            max_overlap,
            gamma,
            measure,
            padded,
        })
    }

    pub fn lattice_dims(&self) -> Dims {
        self.lattice
    }

    /// Lattice index of `χ = 0`.
    pub fn origin(&self) -> [usize; 3] {
        self.origin
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn max_overlap(&self) -> u64 {
        self.max_overlap
    }

    /// Padded transform size used, `None` for the direct method.
    pub fn padded_dims(&self) -> Option<Dims> {
        self.padded
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn chi_of(&self, index: usize) -> [i64; 3] {
        let c = self.lattice.coords(index);
        [0, 1, 2].map(|a| c[a] as i64 - self.origin[a] as i64)
    }

    pub fn index_of(&self, chi: [i64; 3]) -> Option<usize> {
        let p = [0, 1, 2].map(|a| chi[a] + self.origin[a] as i64);
        self.lattice
            .contains(p)
            .then(|| self.lattice.index(p[0] as usize, p[1] as usize, p[2] as usize))
    }

    pub fn score_at_index(&self, index: usize) -> Option<f64> {
        let s = self.scores[index];
        (!s.is_nan()).then_some(s)
    }

    /// Overlap count; `None` where the direct method skipped counting.
    pub fn overlap_at_index(&self, index: usize) -> Option<u64> {
        let n = self.overlap[index];
        (n != UNCOUNTED).then_some(n)
    }

    pub fn score(&self, chi: [i64; 3]) -> Option<f64> {
        self.index_of(chi).and_then(|i| self.score_at_index(i))
    }

    pub fn overlap(&self, chi: [i64; 3]) -> Option<u64> {
        self.index_of(chi).and_then(|i| self.overlap_at_index(i))
    }

    pub fn valid_count(&self) -> usize {
        self.scores.iter().filter(|s| !s.is_nan()).count()
    }

    /// `(χ, score)` for every valid displacement, in lattice order.
    pub fn valid_entries(&self) -> impl Iterator<Item = ([i64; 3], f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_nan())
            .map(|(i, &s)| (self.chi_of(i), s))
    }
}

/// Highest-scoring valid displacement; ties go to the lexicographically
/// smallest `(χ1, χ2, χ3)`.
pub fn argmax_displacement(map: &SimilarityMap) -> Result<([i64; 3], f64)> {
    map.valid_entries()
        .max_by(|(ca, sa), (cb, sb)| sa.total_cmp(sb).then_with(|| cb.cmp(ca)))
        .ok_or(Error::NoValidDisplacements)
}

/// Reference-side spectra, computed once and reused for many floating images.
pub struct PreparedReference {
    dims: Dims,
    floating_dims: Dims,
    padded: Dims,
    measure: Measure,
    features: Vec<Spectrum>,
    mask: Spectrum,
}

impl PreparedReference {
    /// Hands the spectra back to `engine` for reuse by later transforms.
    pub fn release(self, engine: &FftEngine) {
        for s in self.features {
            engine.recycle(s);
        }
        engine.recycle(self.mask);
    }

    /// Transforms the reference feature grids and mask: 7 forward transforms
    /// for the squared measure, 4 for the unsquared one.
    pub fn new(
        engine: &FftEngine,
        ngf: &VectorField,
        mask: &Mask,
        floating_dims: Dims,
        measure: Measure,
    ) -> Result<Self> {
        ensure_same_dims(ngf.dims(), mask.dims(), "reference")?;
        if mask.count() == 0 {
            return Err(Error::EmptyMask);
        }
        let dims = ngf.dims();
        let padded = padded_dims(dims, floating_dims);
        let features = feature_grids(ngf, mask, measure)?
            .iter()
            .map(|g| engine.forward(dims, g, padded))
            .collect::<Result<Vec<_>>>()?;
        let mask = engine.forward(dims, &mask_grid(mask), padded)?;
        Ok(PreparedReference {
            dims,
            floating_dims,
            padded,
            measure,
            features,
            mask,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn padded_dims(&self) -> Dims {
        self.padded
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    /// Similarity map against one floating NGF field.
    pub fn map_against(
        &self,
        engine: &FftEngine,
        ngf: &VectorField,
        mask: &Mask,
        gamma: f64,
    ) -> Result<SimilarityMap> {
        check_gamma(gamma)?;
        ensure_same_dims(ngf.dims(), mask.dims(), "floating")?;
        ensure_same_dims(ngf.dims(), self.floating_dims, "floating vs prepared reference")?;
        if mask.count() == 0 {
            return Err(Error::EmptyMask);
        }
        let fdims = self.floating_dims;
        let mut acc = engine.accumulator(self.dims, fdims, self.padded);
        for ((grid, f), &w) in feature_grids(ngf, mask, self.measure)?
            .iter()
            .zip(&self.features)
            .zip(measure_weights(self.measure))
        {
            engine.forward_accumulate(fdims, grid, f, w, &mut acc)?;
        }
        let numerators = engine.finish(acc);
        let mut mask_acc = engine.accumulator(self.dims, fdims, self.padded);
        engine.forward_accumulate(fdims, &mask_grid(mask), &self.mask, 1.0, &mut mask_acc)?;
        let counts = engine.finish(mask_acc);
        let overlap = round_overlap(&counts)?;
        let (lattice, origin) = (numerators.dims(), numerators.origin());
        SimilarityMap::build(
            lattice,
            origin,
            overlap,
            numerators.into_values(),
            gamma,
            self.measure,
            Some(self.padded),
        )
    }
}

fn round_overlap(counts: &CorrelationGrid) -> Result<Vec<u64>> {
    let mut out = Vec::with_capacity(counts.values().len());
    for (i, &v) in counts.values().iter().enumerate() {
        // saturating cast; anything below -0.5 fails the distance check
        let n = (v + 0.5).max(0.0) as u64;
        if (v - n as f64).abs() > OVERLAP_ROUNDING_TOLERANCE {
            return Err(Error::Inconsistent(format!(
                "mask correlation {v} at χ={:?} is not a voxel count",
                counts.chi_of(i)
            )));
        }
        out.push(n);
    }
    Ok(out)
}

/// Frequency-domain map for either measure.
pub fn similarity_map_fft(
    engine: &FftEngine,
    a_ngf: &VectorField,
    mask_a: &Mask,
    b_ngf: &VectorField,
    mask_b: &Mask,
    gamma: f64,
    measure: Measure,
) -> Result<SimilarityMap> {
    check_gamma(gamma)?;
    let reference = PreparedReference::new(engine, a_ngf, mask_a, b_ngf.dims(), measure)?;
    let map = reference.map_against(engine, b_ngf, mask_b, gamma);
    reference.release(engine);
    map
}

/// Squared-dot-product map via the six-term expansion.
pub fn csngf_map_fft(
    engine: &FftEngine,
    a_ngf: &VectorField,
    mask_a: &Mask,
    b_ngf: &VectorField,
    mask_b: &Mask,
    gamma: f64,
) -> Result<SimilarityMap> {
    similarity_map_fft(engine, a_ngf, mask_a, b_ngf, mask_b, gamma, Measure::Squared)
}

/// Unsquared (sign-sensitive) map via three component correlations.
pub fn usngf_map_fft(
    engine: &FftEngine,
    a_ngf: &VectorField,
    mask_a: &Mask,
    b_ngf: &VectorField,
    mask_b: &Mask,
    gamma: f64,
) -> Result<SimilarityMap> {
    similarity_map_fft(engine, a_ngf, mask_a, b_ngf, mask_b, gamma, Measure::Unsquared)
}

/// Nested-loop evaluation of the masked similarity at every displacement.
///
/// Overlaps are counted voxel by voxel. Displacements whose overlap box is
/// too small to reach `γ · max N` are skipped: they are invalid either way and
/// report no overlap count.
pub fn csngf_map_direct(
    a_ngf: &VectorField,
    mask_a: &Mask,
    b_ngf: &VectorField,
    mask_b: &Mask,
    gamma: f64,
    measure: Measure,
) -> Result<SimilarityMap> {
    check_gamma(gamma)?;
    ensure_same_dims(a_ngf.dims(), mask_a.dims(), "reference")?;
    ensure_same_dims(b_ngf.dims(), mask_b.dims(), "floating")?;
    if mask_a.count() == 0 || mask_b.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (da, db) = (a_ngf.dims(), b_ngf.dims());
    let lattice = Dims([0, 1, 2].map(|i| da.0[i] + db.0[i] - 1));
    let origin = da.0.map(|n| n - 1);
    let chi_of = |i: usize| {
        let c = lattice.coords(i);
        [0, 1, 2].map(|a| c[a] as i64 - origin[a] as i64)
    };
    // x range of the overlap box along one axis
    let span = |chi: i64, na: usize, nb: usize| -> (usize, usize) {
        let lo = (-chi).max(0) as usize;
        let hi = (na as i64).min(nb as i64 - chi).max(lo as i64) as usize;
        (lo, hi)
    };
    let box_volume = |chi: [i64; 3]| -> u64 {
        (0..3)
            .map(|a| {
                let (lo, hi) = span(chi[a], da.0[a], db.0[a]);
                (hi - lo) as u64
            })
            .product()
    };

    let a_vec: Vec<[f64; 3]> = (0..da.len()).map(|i| a_ngf.at(i)).collect();
    let b_vec: Vec<[f64; 3]> = (0..db.len()).map(|i| b_ngf.at(i)).collect();
    let eval = |chi: [i64; 3], with_score: bool| -> (u64, f64) {
        let (x0, x1) = span(chi[0], da.nx(), db.nx());
        let (y0, y1) = span(chi[1], da.ny(), db.ny());
        let (z0, z1) = span(chi[2], da.nz(), db.nz());
        let (mut n, mut sum) = (0u64, 0.0f64);
        for z in z0..z1 {
            let zb = (z as i64 + chi[2]) as usize;
            for y in y0..y1 {
                let yb = (y as i64 + chi[1]) as usize;
                let ia = da.index(x0, y, z);
                let ib = db.index((x0 as i64 + chi[0]) as usize, yb, zb);
                let len = x1 - x0;
                let ma = &mask_a.bits()[ia..ia + len];
                let mb = &mask_b.bits()[ib..ib + len];
                for k in 0..len {
                    if ma[k] && mb[k] {
                        n += 1;
                        if with_score {
                            sum += measure.point(a_vec[ia + k], b_vec[ib + k]);
                        }
                    }
                }
            }
        }
        (n, sum)
    };

    // Maximum overlap: visit displacements by decreasing box volume until no
    // remaining box can beat the best count found.
    let mut order: Vec<(u64, usize)> = (0..lattice.len())
        .map(|i| (box_volume(chi_of(i)), i))
        .collect();
    order.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut max_n = 0u64;
    for &(vol, i) in &order {
        if vol <= max_n {
            break;
        }
        max_n = max_n.max(eval(chi_of(i), false).0);
    }
    let threshold = gamma * max_n as f64;

    let candidates: Vec<usize> = order
        .iter()
        .take_while(|(vol, _)| *vol as f64 >= threshold && *vol >= 1)
        .map(|&(_, i)| i)
        .collect();
    let evaluated: Vec<(usize, u64, f64)> = candidates
        .par_iter()
        .map(|&i| {
            let (n, s) = eval(chi_of(i), true);
            (i, n, s)
        })
        .collect();
    let mut overlap = vec![UNCOUNTED; lattice.len()];
    let mut numer = vec![0.0f64; lattice.len()];
    for (i, n, s) in evaluated {
        overlap[i] = n;
        numer[i] = s;
    }
    SimilarityMap::build(
        lattice,
        origin,
        overlap,
        numer,
        gamma,
        measure,
        None,
    )
}

/// Writes a map as raw little-endian f64 scores (NaN where invalid) plus a
/// JSON header carrying the lattice origin, `gamma` and the measure. The
/// header's mask payload marks valid displacements.
pub fn write_map(map: &SimilarityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (data_name, mask_name) = payload_names(path);
    let bytes: Vec<u8> = map
        .scores
        .iter()
        .flat_map(|s| s.to_le_bytes())
        .collect();
    write_bytes(&sibling(path, &data_name), &bytes)?;
    let valid: Vec<u8> = map.scores.iter().map(|s| !s.is_nan() as u8).collect();
    write_bytes(&sibling(path, &mask_name), &valid)?;
    let origin_chi = map.chi_of(0);
    let mut extra = serde_json::Map::new();
    extra.insert("origin_chi".into(), serde_json::json!(origin_chi));
    extra.insert("gamma".into(), serde_json::json!(map.gamma));
    extra.insert("measure".into(), serde_json::json!(map.measure.as_str()));
    extra.insert("max_overlap".into(), serde_json::json!(map.max_overlap));
    RawHeader {
        dims: map.lattice.0,
        dtype: "f64".into(),
        order: ORDER_X_FASTEST.into(),
        spacing: [1.0; 3],
        data: data_name,
        mask: Some(mask_name),
        extra,
    }
    .write(path)
}

/// A map read back from disk: scores (None where invalid) and the χ of lattice index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MapDump {
    pub dims: Dims,
    pub origin_chi: [i64; 3],
    pub gamma: f64,
    pub measure: Measure,
    pub scores: Vec<Option<f64>>,
}

impl MapDump {
    pub fn score(&self, chi: [i64; 3]) -> Option<f64> {
        let p = [0, 1, 2].map(|a| chi[a] - self.origin_chi[a]);
        self.dims
            .contains(p)
            .then(|| self.scores[self.dims.index(p[0] as usize, p[1] as usize, p[2] as usize)])
            .flatten()
    }

    /// Same tie rule as [`argmax_displacement`].
    pub fn argmax(&self) -> Option<([i64; 3], f64)> {
        self.scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let c = self.dims.coords(i);
                s.map(|s| ([0, 1, 2].map(|a| c[a] as i64 + self.origin_chi[a]), s))
            })
            .max_by(|(ca, sa), (cb, sb)| sa.total_cmp(sb).then_with(|| cb.cmp(ca)))
    }
}

pub fn read_map(path: impl AsRef<Path>) -> Result<MapDump> {
    let path = path.as_ref();
    let header = RawHeader::read(path)?;
    let bad = |message: String| Error::Header {
        path: path.to_owned(),
        message,
    };
    if header.dtype != "f64" {
        return Err(bad(format!("map dtype must be f64, got {:?}", header.dtype)));
    }
    let dims = Dims(header.dims);
    let origin_chi: [i64; 3] = header
        .extra
        .get("origin_chi")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| bad("missing origin_chi".into()))?;
    let gamma = header
        .extra
        .get("gamma")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| bad("missing gamma".into()))?;
    let measure: Measure = header
        .extra
        .get("measure")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing measure".into()))?
        .parse()?;
    let bytes = read_bytes(&sibling(path, &header.data))?;
    if bytes.len() != dims.len() * 8 {
        return Err(Error::PayloadSizeMismatch {
            expected: dims.len() * 8,
            found: bytes.len(),
        });
    }
    let scores = bytes
        .chunks_exact(8)
        .map(|c| {
            let v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            (!v.is_nan()).then_some(v)
        })
        .collect();
    Ok(MapDump {
        dims,
        origin_chi,
        gamma,
        measure,
        scores,
    })
}
