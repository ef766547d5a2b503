//! Global rigid registration: a Gaussian pyramid, random rotation sampling
//! around the best rotations of the previous level, and an exhaustive
//! displacement search per rotation through the similarity map.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csngf::{argmax_displacement, PreparedReference, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::ngf::{ngf, Measure, NgfConfig};
use crate::volume::{
    apply_rigid, downsample, gaussian_smooth, normalize_angle, Dims, Interpolation, Mask,
    RigidTransform, Volume,
};
use crate::xcorr::FftEngine;

/// Side length whose cube sets the reference size for the rotation budget.
pub const REFERENCE_SIDE: usize = 151;

/// Lower bound on the scaled per-level rotation budget.
pub const MIN_ROTATIONS: [usize; 4] = [200, 100, 30, 0];

/// Candidates closer than this on every angle count as the same rotation.
pub const DEDUP_DEGREES: f64 = 0.5;

/// Per-level schedule, coarsest level first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Downsampling factor.
    pub d: Vec<usize>,
    /// Gaussian smoothing in original-resolution voxels, applied before downsampling.
    pub sigma: Vec<f64>,
    /// Maximum rotation step per axis in degrees.
    pub u: Vec<f64>,
    /// Number of random rotations.
    pub a: Vec<usize>,
    /// Number of starting rotations carried into the level.
    pub p: Vec<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            d: vec![4, 2, 2, 1],
            sigma: vec![5.0, 3.0, 2.0, 1.5],
            u: vec![180.0, 30.0, 10.0, 0.0],
            a: vec![5000, 3000, 300, 0],
            p: vec![1, 20, 3, 1],
        }
    }
}

impl PyramidConfig {
    pub fn levels(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.d.len();
        if m == 0 {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        let lens = [self.sigma.len(), self.u.len(), self.a.len(), self.p.len()];
        if lens.iter().any(|&l| l != m) {
            return Err(Error::invalid(format!(
                "pyramid vectors differ in length: d={m}, sigma/u/a/p={lens:?}"
            )));
        }
        if self.d.contains(&0) {
            return Err(Error::invalid("downsampling factors must be >= 1"));
        }
        if self.p.contains(&0) {
            return Err(Error::invalid("starting-point counts must be >= 1"));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("smoothing sigmas must be finite and >= 0"));
        }
        if self.u.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(Error::invalid("rotation steps must be finite and >= 0"));
        }
        Ok(())
    }

    /// Shrinks the rotation budget for volumes smaller than 151³.
    ///
    /// `a` is multiplied by `voxels / 151³` and floored at
    /// [`MIN_ROTATIONS`], but never raised above its configured value.
    pub fn scaled_for(&self, voxels: usize) -> Self {
        let full = REFERENCE_SIDE.pow(3);
        if voxels >= full {
            return self.clone();
        }
        let ratio = voxels as f64 / full as f64;
        let a = self
            .a
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let floor = MIN_ROTATIONS.get(k).copied().unwrap_or(0);
                ((a as f64 * ratio).floor() as usize).max(floor).min(a)
            })
            .collect();
        PyramidConfig { a, ..self.clone() }
    }
}

/// Similarity and bookkeeping options shared by every level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub measure: Measure,
    /// Negates the floating intensities before anything else.
    pub invert_floating: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            gamma: DEFAULT_GAMMA,
            epsilon: NgfConfig::DEFAULT_EPSILON,
            measure: Measure::Squared,
            invert_floating: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        NgfConfig::new(self.epsilon).map(|_| ())
    }
}

/// The JSON configuration file: pyramid vectors and search options side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    #[serde(default)]
    pub levels: Option<usize>,
    #[serde(flatten)]
    pub pyramid: PyramidConfig,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub measure: Measure,
    #[serde(default)]
    pub invert_floating: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_epsilon() -> f64 {
    NgfConfig::DEFAULT_EPSILON
}

impl RegistrationConfig {
    pub fn new(pyramid: PyramidConfig, search: SearchConfig) -> Self {
        RegistrationConfig {
            levels: Some(pyramid.levels()),
            pyramid,
            gamma: search.gamma,
            epsilon: search.epsilon,
            measure: search.measure,
            invert_floating: search.invert_floating,
            seed: search.seed,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            gamma: self.gamma,
            epsilon: self.epsilon,
            measure: self.measure,
            invert_floating: self.invert_floating,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if let Some(m) = self.levels {
            if m != self.pyramid.levels() {
                return Err(Error::invalid(format!(
                    "levels = {m} but the pyramid vectors have {} entries",
                    self.pyramid.levels()
                )));
            }
        }
        self.search().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One evaluated rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub euler_deg: [f64; 3],
    /// Best displacement at the level's resolution.
    pub chi: [i64; 3],
    pub score: f64,
    /// Zero-based pyramid level.
    pub level: usize,
}

/// What happened at one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: usize,
    pub factor: usize,
    pub dims: Dims,
    /// Rotations evaluated, starting points included.
    pub evaluated: usize,
    /// Best distinct candidates, best first; the leading ones seed the next level.
    pub best: Vec<Candidate>,
    pub time_s: f64,
}

/// Outcome of [`global_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Maps reference voxels to floating voxels at full resolution.
    #[serde(flatten)]
    pub transform: RigidTransform,
    pub score: f64,
    pub per_level: Vec<LevelRecord>,
    pub wall_time_s: f64,
}

impl SearchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Perturbs each angle of `base` by an independent draw from `U(-u, u)`.
///
/// `u = 0` returns `base` untouched; otherwise the angles are wrapped to
/// `[-180, 180)`.
pub fn sample_rotation(base: [f64; 3], u: f64, rng: &mut impl Rng) -> [f64; 3] {
    if u == 0.0 {
        return base;
    }
    base.map(|b| normalize_angle(b + rng.gen_range(-u..=u)))
}

/// Pyramid level: the smoothed, downsampled floating image and the prepared
/// reference spectra.
pub struct LevelImages {
    level: usize,
    factor: usize,
    floating: Volume,
    floating_mask: Mask,
    reference: PreparedReference,
    ngf_cfg: NgfConfig,
    gamma: f64,
}

impl LevelImages {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn floating_dims(&self) -> Dims {
        self.floating.dims()
    }

    pub fn reference_dims(&self) -> Dims {
        self.reference.dims()
    }
}

fn level_image(v: &Volume, m: &Mask, sigma: f64, factor: usize) -> Result<(Volume, Mask)> {
    let smoothed = gaussian_smooth(v, sigma)?;
    let (v, m) = downsample(&smoothed, m, factor)?;
    if v.dims().0.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "level dims {} too small; every axis needs at least 2 voxels",
            v.dims()
        )));
    }
    Ok((v, m))
}

/// Smooths and downsamples both images for level `k` (zero-based) and
/// transforms the reference features once.
pub fn build_level(
    engine: &FftEngine,
    reference: (&Volume, &Mask),
    floating: (&Volume, &Mask),
    k: usize,
    pyramid: &PyramidConfig,
    search: &SearchConfig,
) -> Result<LevelImages> {
    pyramid.validate()?;
    search.validate()?;
    if k >= pyramid.levels() {
        return Err(Error::invalid(format!(
            "level {k} out of range for a {}-level pyramid",
            pyramid.levels()
        )));
    }
    let (sigma, factor) = (pyramid.sigma[k], pyramid.d[k]);
    let (rv, rm) = level_image(reference.0, reference.1, sigma, factor)?;
    let (fv, fm) = level_image(floating.0, floating.1, sigma, factor)?;
    let ngf_cfg = NgfConfig::new(search.epsilon)?;
    let ref_ngf = ngf(&rv, &rm, ngf_cfg)?;
    let prepared = PreparedReference::new(engine, &ref_ngf, &rm, fv.dims(), search.measure)?;
    Ok(LevelImages {
        level: k,
        factor,
        floating: fv,
        floating_mask: fm,
        reference: prepared,
        ngf_cfg,
        gamma: search.gamma,
    })
}

/// Rotates the level's floating image about its center, then finds the best
/// displacement for that rotation.
pub fn evaluate_rotation(
    engine: &FftEngine,
    level: &LevelImages,
    euler_deg: [f64; 3],
) -> Result<Candidate> {
    let rot = RigidTransform::rotation_about(euler_deg, level.floating.dims().center());
    let (wv, wm) = apply_rigid(&level.floating, &level.floating_mask, &rot, Interpolation::Trilinear)?;
    if wm.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let field = ngf(&wv, &wm, level.ngf_cfg)?;
    let map = level.reference.map_against(engine, &field, &wm, level.gamma)?;
    let (chi, score) = argmax_displacement(&map)?;
    Ok(Candidate {
        euler_deg: rot.euler_deg,
        chi,
        score,
        level: level.level,
    })
}

fn angle_gap(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Orders by score (best first), then by angles, and drops near-duplicates.
fn rank_distinct(mut cands: Vec<Candidate>, keep: usize) -> Vec<Candidate> {
    cands.sort_by(|x, y| {
        y.score.total_cmp(&x.score).then_with(|| {
            (0..3)
                .map(|i| x.euler_deg[i].total_cmp(&y.euler_deg[i]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut out: Vec<Candidate> = Vec::with_capacity(keep);
    for c in cands {
        if out.len() == keep {
            break;
        }
        let dup = out
            .iter()
            .any(|k| (0..3).all(|i| angle_gap(k.euler_deg[i], c.euler_deg[i]) < DEDUP_DEGREES));
        if !dup {
            out.push(c);
        }
    }
    out
}

// Rotations that leave no usable overlap are dropped rather than aborting the search.
fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::EmptyMask | Error::EmptyIntersection | Error::NoValidDisplacements)
}

/// Number of best candidates recorded per level.
const HISTORY_LEN: usize = 20;

/// Runs the full coarse-to-fine search.
///
/// Work inside a level runs on the current rayon pool; the result does not
/// depend on how many threads it has.
pub fn global_search(
    engine: &FftEngine,
    reference: (&Volume, &Mask),
    floating: (&Volume, &Mask),
    pyramid: &PyramidConfig,
    search: &SearchConfig,
) -> Result<SearchResult> {
    pyramid.validate()?;
    search.validate()?;
    let started = Instant::now();
    let inverted;
    let floating = if search.invert_floating {
        inverted = floating.0.negated();
        (&inverted, floating.1)
    } else {
        floating
    };

    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let mut starts: Vec<[f64; 3]> = vec![[0.0; 3]];
    let mut per_level = Vec::with_capacity(pyramid.levels());
    let mut best: Option<(Candidate, usize)> = None;

    for k in 0..pyramid.levels() {
        let level_start = Instant::now();
        let level = build_level(engine, reference, floating, k, pyramid, search)?;

        // Starting points are always re-evaluated; random samples are drawn
        // sequentially so the set does not depend on scheduling.
        let mut thetas = starts.clone();
        for _ in 0..pyramid.a[k] {
            let base = *starts.choose(&mut rng).expect("at least one starting point");
            thetas.push(sample_rotation(base, pyramid.u[k], &mut rng));
        }

        let evaluated: Vec<Candidate> = thetas
            .par_iter()
            .map(|&theta| evaluate_rotation(engine, &level, theta))
            .collect::<Vec<_>>()
            .into_iter()
            .filter_map(|r| match r {
                Ok(c) => Some(Ok(c)),
                Err(e) if is_degenerate(&e) => None,
                Err(e) => Some(Err(e)),
            })
            .collect::<Result<_>>()?;
        let count = thetas.len();
        let next_p = pyramid.p.get(k + 1).copied().unwrap_or(1);
        let ranked = rank_distinct(evaluated, next_p.max(HISTORY_LEN));
        let Some(&top) = ranked.first() else {
            return Err(Error::NoValidDisplacements);
        };
        starts = ranked.iter().take(next_p).map(|c| c.euler_deg).collect();
        best = Some((top, level.factor()));
        per_level.push(LevelRecord {
            level: k,
            factor: level.factor(),
            dims: level.floating_dims(),
            evaluated: count,
            best: ranked,
            time_s: level_start.elapsed().as_secs_f64(),
        });
        level.reference.release(engine);
    }

    let (top, factor) = best.expect("at least one level");
    let center = floating.0.dims().center();
    let transform = RigidTransform::new(
        top.euler_deg,
        top.chi.map(|c| (c * factor as i64) as f64),
        center,
    );
    Ok(SearchResult {
        transform,
        score: top.score,
        per_level,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_volume(dims: Dims, shift: [f64; 3]) -> Volume {
        // asymmetric, strongly structured content
        let c = dims.center();
        Volume::from_fn(dims, |x, y, z| {
            let p = [x as f64 - c[0] - shift[0], y as f64 - c[1] - shift[1], z as f64 - c[2] - shift[2]];
            let e1 = (p[0] / 6.0).powi(2) + (p[1] / 3.5).powi(2) + (p[2] / 2.5).powi(2);
            let e2 = ((p[0] - 3.0) / 2.0).powi(2) + ((p[1] + 4.0) / 2.0).powi(2) + ((p[2] - 2.0) / 3.0).powi(2);
            (if e1 < 1.0 { 1.0 } else { 0.0 }) + (if e2 < 1.0 { 0.6 } else { 0.0 })
        })
    }

    fn small_pyramid() -> PyramidConfig {
        PyramidConfig {
            d: vec![2, 1],
            sigma: vec![1.0, 0.5],
            u: vec![20.0, 0.0],
            a: vec![6, 0],
            p: vec![1, 2],
        }
    }

    #[test]
    fn default_schedule_and_scaling() {
        let p = PyramidConfig::default();
        p.validate().unwrap();
        assert_eq!(p.levels(), 4);
        assert_eq!(p.scaled_for(64 * 64 * 64).a, vec![380, 228, 30, 0]);
        assert_eq!(p.scaled_for(32 * 32 * 32).a, vec![200, 100, 30, 0]);
        assert_eq!(p.scaled_for(151 * 151 * 151), p);
        let small = PyramidConfig { a: vec![10, 10, 10, 0], ..p.clone() };
        assert_eq!(small.scaled_for(1000).a, vec![10, 10, 10, 0]);
    }

    #[test]
    fn invalid_pyramids_are_rejected() {
        let mut p = PyramidConfig::default();
        p.sigma.pop();
        assert!(p.validate().is_err());
        let p = PyramidConfig { p: vec![1, 0, 3, 1], ..PyramidConfig::default() };
        assert!(p.validate().is_err());
        let p = PyramidConfig { u: vec![-1.0, 0.0, 0.0, 0.0], ..PyramidConfig::default() };
        assert!(p.validate().is_err());
        let p = PyramidConfig { d: vec![], sigma: vec![], u: vec![], a: vec![], p: vec![] };
        assert!(p.validate().is_err());
    }

    #[test]
    fn config_file_roundtrip_and_defaults() {
        let cfg = RegistrationConfig::new(PyramidConfig::default(), SearchConfig::default());
        let back = RegistrationConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);

        let text = r#"{"levels":2,"d":[2,1],"sigma":[1,0],"u":[30,0],"a":[5,0],"p":[1,1]}"#;
        let cfg = RegistrationConfig::from_json(text).unwrap();
        assert_eq!(cfg.search(), SearchConfig::default());

        let wrong_levels = r#"{"levels":3,"d":[2,1],"sigma":[1,0],"u":[30,0],"a":[5,0],"p":[1,1]}"#;
        assert!(RegistrationConfig::from_json(wrong_levels).is_err());
        let bad_gamma = r#"{"d":[1],"sigma":[0],"u":[0],"a":[0],"p":[1],"gamma":0}"#;
        assert!(RegistrationConfig::from_json(bad_gamma).is_err());
        let unknown = r#"{"d":[1],"sigma":[0],"u":[0],"a":[0],"p":[1],"gama":0.5}"#;
        assert!(RegistrationConfig::from_json(unknown).is_err());
    }

    #[test]
    fn zero_step_returns_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = [12.5, -170.0, 3.0];
        assert_eq!(sample_rotation(base, 0.0, &mut rng), base);
    }

    #[test]
    fn full_range_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let t = sample_rotation([0.0; 3], 180.0, &mut rng);
            for i in 0..3 {
                assert!((-180.0..180.0).contains(&t[i]));
                sum[i] += t[i].abs();
            }
        }
        for s in sum {
            assert!((s / n as f64 - 90.0).abs() < 2.0);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_rotation([1.0, 2.0, 3.0], 30.0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn level_identity_and_dims() {
        let e = FftEngine::new();
        let v = blob_volume(Dims::cube(12), [0.0; 3]);
        let m = Mask::full(v.dims());
        let identity = PyramidConfig { d: vec![1], sigma: vec![0.0], u: vec![0.0], a: vec![0], p: vec![1] };
        let lvl = build_level(&e, (&v, &m), (&v, &m), 0, &identity, &SearchConfig::default()).unwrap();
        assert_eq!(lvl.floating, v);
        assert_eq!(lvl.floating_mask, m);

        let big = Volume::zeros(Dims::cube(64));
        let bm = Mask::full(big.dims());
        let lvl = build_level(&e, (&big, &bm), (&big, &bm), 0, &PyramidConfig::default(), &SearchConfig::default())
            .unwrap();
        assert_eq!(lvl.floating_dims(), Dims::cube(16));
        assert_eq!(lvl.reference_dims(), Dims::cube(16));

        let tiny = Volume::zeros(Dims::cube(4));
        let tm = Mask::full(tiny.dims());
        assert!(build_level(&e, (&tiny, &tm), (&tiny, &tm), 0, &PyramidConfig::default(), &SearchConfig::default())
            .is_err());
    }

    #[test]
    fn reference_spectra_are_computed_once_per_level() {
        let e = FftEngine::new();
        let v = blob_volume(Dims::cube(12), [0.0; 3]);
        let m = Mask::full(v.dims());
        let p = PyramidConfig { d: vec![1], sigma: vec![0.0], u: vec![0.0], a: vec![0], p: vec![1] };
        let lvl = build_level(&e, (&v, &m), (&v, &m), 0, &p, &SearchConfig::default()).unwrap();
        assert_eq!(e.counts().forward, 7);
        for i in 0..10 {
            evaluate_rotation(&e, &lvl, [i as f64, 0.0, 0.0]).unwrap();
        }
        assert_eq!(e.counts().forward, 10 * 7 + 7);
        assert_eq!(e.counts().inverse, 10 * 2);
    }

    #[test]
    fn zero_rotation_on_identical_images_gives_zero_shift() {
        let e = FftEngine::new();
        let v = blob_volume(Dims::cube(16), [0.0; 3]);
        let m = Mask::full(v.dims());
        let p = PyramidConfig { d: vec![1], sigma: vec![0.0], u: vec![0.0], a: vec![0], p: vec![1] };
        let lvl = build_level(&e, (&v, &m), (&v, &m), 0, &p, &SearchConfig::default()).unwrap();
        let c = evaluate_rotation(&e, &lvl, [0.0; 3]).unwrap();
        assert_eq!(c.chi, [0, 0, 0]);
        let wrong = evaluate_rotation(&e, &lvl, [0.0, 0.0, 90.0]).unwrap();
        assert!(wrong.score < c.score);
    }

    #[test]
    fn pure_shift_is_recovered_at_full_resolution() {
        let e = FftEngine::new();
        let dims = Dims::cube(20);
        let reference = blob_volume(dims, [0.0; 3]);
        let floating = blob_volume(dims, [3.0, -2.0, 1.0]);
        let m = Mask::full(dims);
        let p = PyramidConfig { d: vec![2, 1], sigma: vec![1.0, 0.0], u: vec![0.0, 0.0], a: vec![0, 0], p: vec![1, 1] };
        let r = global_search(&e, (&reference, &m), (&floating, &m), &p, &SearchConfig::default()).unwrap();
        // reference(x) = floating(x + t)
        assert_eq!(r.transform.translation_vx, [3.0, -2.0, 1.0]);
        assert_eq!(r.transform.euler_deg, [0.0; 3]);
        assert_eq!(r.per_level.len(), 2);
        assert_eq!(r.per_level[0].factor, 2);
    }

    #[test]
    fn starting_points_only_evaluates_sum_of_p() {
        let e = FftEngine::new();
        let v = blob_volume(Dims::cube(16), [0.0; 3]);
        let m = Mask::full(v.dims());
        let p = PyramidConfig { d: vec![2, 2, 1], sigma: vec![1.0; 3], u: vec![0.0; 3], a: vec![0; 3], p: vec![1, 1, 1] };
        let r = global_search(&e, (&v, &m), (&v, &m), &p, &SearchConfig::default()).unwrap();
        let total: usize = r.per_level.iter().map(|l| l.evaluated).sum();
        assert_eq!(total, 3);
        // 7 reference + 7 floating transforms per level
        assert_eq!(e.counts().forward, 3 * 14);
    }

    #[test]
    fn search_is_deterministic_and_monotone() {
        let e = FftEngine::new();
        let dims = Dims::cube(16);
        let reference = blob_volume(dims, [0.0; 3]);
        let m = Mask::full(dims);
        let rot = RigidTransform::rotation_about([0.0, 0.0, 12.0], dims.center());
        let (floating, fm) = apply_rigid(&reference, &m, &rot, Interpolation::Trilinear).unwrap();
        let cfg = SearchConfig { seed: 11, ..SearchConfig::default() };
        let a = global_search(&e, (&reference, &m), (&floating, &fm), &small_pyramid(), &cfg).unwrap();
        let b = global_search(&e, (&reference, &m), (&floating, &fm), &small_pyramid(), &cfg).unwrap();
        assert_eq!(a.transform, b.transform);
        assert_eq!(a.score, b.score);
        for (x, y) in a.per_level.iter().zip(&b.per_level) {
            assert_eq!(x.best, y.best);
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool
            .install(|| global_search(&e, (&reference, &m), (&floating, &fm), &small_pyramid(), &cfg))
            .unwrap();
        assert_eq!(a.transform, c.transform);

        for lvl in &a.per_level {
            assert!(lvl.best.windows(2).all(|w| w[0].score >= w[1].score));
        }
        assert_eq!(a.per_level[0].evaluated, 1 + 6);
        assert_eq!(a.per_level[1].evaluated, 2);
    }

    #[test]
    fn ranking_breaks_ties_and_deduplicates() {
        let c = |e: [f64; 3], s: f64| Candidate { euler_deg: e, chi: [0; 3], score: s, level: 0 };
        let ranked = rank_distinct(
            vec![
                c([5.0, 0.0, 0.0], 1.0),
                c([1.0, 0.0, 0.0], 1.0),
                c([1.2, 0.3, -0.1], 0.9),
                c([-179.9, 0.0, 0.0], 0.8),
                c([179.8, 0.0, 0.0], 0.7),
            ],
            10,
        );
        let angles: Vec<f64> = ranked.iter().map(|c| c.euler_deg[0]).collect();
        assert_eq!(angles, vec![1.0, 5.0, -179.9]);
        assert_eq!(rank_distinct(ranked, 1).len(), 1);
    }

    #[test]
    fn inverted_floating_flips_unsquared_but_not_squared() {
        let e = FftEngine::new();
        let v = blob_volume(Dims::cube(12), [0.0; 3]);
        let m = Mask::full(v.dims());
        let p = PyramidConfig { d: vec![1], sigma: vec![0.0], u: vec![0.0], a: vec![0], p: vec![1] };
        let run = |measure, invert_floating| {
            let cfg = SearchConfig { measure, invert_floating, ..SearchConfig::default() };
            global_search(&e, (&v, &m), (&v, &m), &p, &cfg).unwrap()
        };
        let sq = run(Measure::Squared, false);
        let sq_inv = run(Measure::Squared, true);
        assert!((sq.score - sq_inv.score).abs() < 1e-9);
        assert_eq!(sq.transform.translation_vx, [0.0; 3]);
        let us = run(Measure::Unsquared, false);
        let us_inv = run(Measure::Unsquared, true);
        assert!(us.score > 0.0);
        assert!(us_inv.score < us.score);
    }
}
