//! Synthetic evaluation: multimodal phantoms, displaced trial pairs, the
//! corner-distance error, success statistics and the FFT-versus-direct
//! runtime benchmark.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csngf::{csngf_map_direct, similarity_map_fft};
use crate::error::{Error, Result};
use crate::ngf::{ngf, Measure, NgfConfig};
use crate::search::{global_search, PyramidConfig, SearchConfig};
use crate::volume::{
    apply_rigid, gaussian_smooth, load_volume, rotation_matrix, save_volume, Dims, Interpolation,
    Mask, Mat3, RigidTransform, Volume,
};
use crate::xcorr::FftEngine;

/// Success threshold on the corner error, in voxels.
pub const SUCCESS_THRESHOLD_VX: f64 = 5.0;

/// Step and upper end of the cumulative success curve, in voxels.
pub const CURVE_STEP_VX: f64 = 0.25;
pub const CURVE_MAX_VX: f64 = 20.0;

/// Recipe for a pair of co-registered volumes with unrelated radiometry.
///
/// Label 0 is background, label 1 the head ellipsoid, and blobs cycle
/// through labels `2..` inside the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub head_radius: [f64; 3],
    pub blobs: usize,
    /// Smallest and largest blob semi-axis in voxels.
    pub blob_radius: [f64; 2],
    /// Label to mean intensity, modality A.
    pub intensities_a: Vec<f64>,
    /// Label to mean intensity, modality B.
    pub intensities_b: Vec<f64>,
    pub noise_sigma: f64,
    /// Gaussian smoothing of A and B.
    pub smoothing: [f64; 2],
    /// Optional power applied to B's intensities before smoothing.
    #[serde(default)]
    pub exponent_b: Option<f64>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(112),
            head_radius: [29.0, 24.0, 20.0],
            blobs: 40,
            blob_radius: [2.0, 6.0],
            intensities_a: vec![0.0, 0.35, 0.9, 0.6, 0.15, 1.0],
            intensities_b: vec![0.0, 0.8, 0.25, 0.45, 0.95, 0.1],
            noise_sigma: 0.02,
            smoothing: [0.8, 1.2],
            exponent_b: None,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let labels = self.intensities_a.len();
        if labels < 2 || self.intensities_b.len() != labels {
            return Err(Error::invalid(
                "intensity tables need the same length and at least 2 labels",
            ));
        }
        for table in [&self.intensities_a, &self.intensities_b] {
            if table.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("intensity tables must be finite"));
            }
            for i in 0..labels {
                if table[i + 1..].contains(&table[i]) {
                    return Err(Error::invalid("intensity tables must be injective"));
                }
            }
        }
        if let Some(e) = self.exponent_b {
            if !(e > 0.0 && e.is_finite()) || self.intensities_b.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(
                    "exponent must be positive and needs a non-negative B table",
                ));
            }
        }
        if self.dims.is_empty() {
            return Err(Error::invalid("phantom dims must be nonzero"));
        }
        let [rmin, rmax] = self.blob_radius;
        if !(rmin > 0.0 && rmax >= rmin) || self.head_radius.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid("radii must be positive with min <= max"));
        }
        if !(self.noise_sigma >= 0.0) || self.smoothing.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::invalid("noise and smoothing must be >= 0"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    rot: Mat3,
    label: u8,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|i| p[i] - self.center[i]);
        (0..3)
            .map(|i| {
                let q = self.rot[i][0] * d[0] + self.rot[i][1] * d[1] + self.rot[i][2] * d[2];
                (q / self.radii[i]).powi(2)
            })
            .sum::<f64>()
            < 1.0
    }
}

fn label_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dims = spec.dims;
    let c = dims.center();
    let labels = spec.intensities_a.len();
    let head = Ellipsoid {
        center: c,
        radii: spec.head_radius,
        rot: rotation_matrix([0.0; 3]),
        label: 1,
    };
    let blobs: Vec<Ellipsoid> = (0..spec.blobs)
        .map(|i| {
            // centers uniform in the inner three quarters of the head
            let u = loop {
                let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if u.iter().map(|x| x * x).sum::<f64>() < 1.0 {
                    break u;
                }
            };
            let center = [0, 1, 2].map(|a| c[a] + 0.75 * u[a] * spec.head_radius[a]);
            let radii = std::array::from_fn(|_| rng.gen_range(spec.blob_radius[0]..=spec.blob_radius[1]));
            let angles = std::array::from_fn(|_| rng.gen_range(-180.0..180.0));
            let label = if labels > 2 { 2 + (i % (labels - 2)) as u8 } else { 1 };
            Ellipsoid {
                center,
                radii,
                rot: rotation_matrix(angles),
                label,
            }
        })
        .collect();

    let slab = dims.nx() * dims.ny();
    let mut out = vec![0u8; dims.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(z, s)| {
        for y in 0..dims.ny() {
            for x in 0..dims.nx() {
                let p = [x as f64, y as f64, z as f64];
                if !head.contains(p) {
                    continue;
                }
                let mut label = 1;
                for b in &blobs {
                    if b.contains(p) {
                        label = b.label;
                    }
                }
                s[y * dims.nx() + x] = label;
            }
        }
    });
    out
}

fn render(
    labels: &[u8],
    dims: Dims,
    table: &[f64],
    exponent: Option<f64>,
    sigma: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    let data = labels
        .iter()
        .map(|&l| {
            let v = table[l as usize];
            exponent.map_or(v, |e| v.powf(e)) as f32
        })
        .collect();
    let clean = gaussian_smooth(&Volume::new(dims, data)?, sigma)?;
    if noise == 0.0 {
        return Ok(clean);
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let noisy = clean
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)) as f32)
        .collect();
    Volume::new(dims, noisy)
}

/// Renders one shared label field in both modalities.
pub fn gen_phantom_pair(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = label_field(spec, &mut rng);
    let mut rng_a = stream_rng(spec.seed, 1);
    let mut rng_b = stream_rng(spec.seed, 2);
    let a = render(&labels, spec.dims, &spec.intensities_a, None, spec.smoothing[0], spec.noise_sigma, &mut rng_a)?;
    let b = render(
        &labels,
        spec.dims,
        &spec.intensities_b,
        spec.exponent_b,
        spec.smoothing[1],
        spec.noise_sigma,
        &mut rng_b,
    )?;
    Ok((a, b))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ranges for the ground-truth displacement of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Each Euler angle is drawn from `U(-r, r)` degrees.
    pub rotation_deg: [f64; 3],
    /// Each shift is drawn uniformly from the integers in `[-s, s]`.
    pub shift_vx: [i64; 3],
    pub block: Dims,
    #[serde(default = "default_gt_interpolation")]
    pub interpolation: Interpolation,
    pub seed: u64,
}

fn default_gt_interpolation() -> Interpolation {
    Interpolation::Tricubic
}

/// A displaced pair with its ground truth in the block frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub reference: Volume,
    pub reference_mask: Mask,
    pub floating: Volume,
    pub floating_mask: Mask,
    /// Maps reference block voxels to floating block voxels.
    pub ground_truth: RigidTransform,
}

/// Warps `a` by a random rigid transform and center-crops it (reference)
/// together with the untouched `b` (floating).
pub fn make_trial(a: &Volume, b: &Volume, spec: &TrialSpec) -> Result<Trial> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch(format!(
            "phantom modalities differ: {} vs {}",
            a.dims(),
            b.dims()
        )));
    }
    let (dims, block) = (a.dims(), spec.block);
    if (0..3).any(|i| block.0[i] > dims.0[i] || block.0[i] < 2) {
        return Err(Error::invalid(format!("block {block} does not fit volume {dims}")));
    }
    if spec.rotation_deg.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || spec.shift_vx.iter().any(|&s| s < 0) {
        return Err(Error::invalid("trial ranges must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let euler = spec
        .rotation_deg
        .map(|r| if r == 0.0 { 0.0 } else { rng.gen_range(-r..=r) });
    let shift = spec.shift_vx.map(|s| rng.gen_range(-s..=s) as f64);

    let offset = [0, 1, 2].map(|i| (dims.0[i] - block.0[i]) / 2);
    let block_center = block.center();
    // Rotating about the block center keeps the shift unchanged when the
    // transform is re-expressed in block coordinates.
    let full_center = [0, 1, 2].map(|i| offset[i] as f64 + block_center[i]);
    let full = RigidTransform::new(euler, shift, full_center);
    let (warped, warped_mask) = apply_rigid(a, &Mask::full(dims), &full, spec.interpolation)?;

    let reference_mask = warped_mask.crop(offset, block)?;
    if reference_mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Trial {
        reference: warped.crop(offset, block)?,
        reference_mask,
        floating: b.crop(offset, block)?,
        floating_mask: Mask::full(block),
        ground_truth: RigidTransform::new(euler, shift, block_center),
    })
}

/// The 8 corners of a block, `0` or `n - 1` on each axis.
pub fn block_corners(block: Dims) -> [[f64; 3]; 8] {
    std::array::from_fn(|k| [0, 1, 2].map(|a| if k >> a & 1 == 1 { (block.0[a] - 1) as f64 } else { 0.0 }))
}

/// Mean Euclidean distance between the block corners mapped by each transform.
pub fn corner_error(ground_truth: &RigidTransform, recovered: &RigidTransform, block: Dims) -> f64 {
    let corners = block_corners(block);
    corners
        .iter()
        .map(|&c| {
            let (p, q) = (ground_truth.apply(c), recovered.apply(c));
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / corners.len() as f64
}

/// Similarity measure and floating-image treatment used for a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Squared,
    Unsquared,
    UnsquaredInverted,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Squared, Variant::Unsquared, Variant::UnsquaredInverted];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Squared => "squared",
            Variant::Unsquared => "unsquared",
            Variant::UnsquaredInverted => "unsquared-inverted",
        }
    }

    pub fn from_options(measure: Measure, invert_floating: bool) -> Self {
        match (measure, invert_floating) {
            (Measure::Unsquared, true) => Variant::UnsquaredInverted,
            (Measure::Unsquared, false) => Variant::Unsquared,
            // the squared measure ignores the sign of the floating gradients
            (Measure::Squared, _) => Variant::Squared,
        }
    }

    pub fn apply(self, cfg: SearchConfig) -> SearchConfig {
        let (measure, invert_floating) = match self {
            Variant::Squared => (Measure::Squared, false),
            Variant::Unsquared => (Measure::Unsquared, false),
            Variant::UnsquaredInverted => (Measure::Unsquared, true),
        };
        SearchConfig {
            measure,
            invert_floating,
            ..cfg
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// One search on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub variant: Variant,
    pub ground_truth: RigidTransform,
    pub recovered: RigidTransform,
    pub d_e: f64,
    pub success: bool,
    pub time_s: f64,
}

/// A trial together with the identifiers that go into its records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialCase {
    pub index: usize,
    pub seed: u64,
    pub trial: Trial,
}

/// Records of every (trial, variant) search, in trial-then-variant order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<TrialRecord>,
    pub variants: Vec<Variant>,
    pub threshold: f64,
}

impl Evaluation {
    /// Fraction of trials with `d_E < t` for one variant.
    pub fn success_rate(&self, variant: Variant, t: f64) -> f64 {
        let rows: Vec<&TrialRecord> = self.records.iter().filter(|r| r.variant == variant).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.d_e < t).count() as f64 / rows.len() as f64
    }

    pub fn successes(&self, variant: Variant) -> usize {
        self.records
            .iter()
            .filter(|r| r.variant == variant && r.success)
            .count()
    }

    /// `(t, fraction per variant)` for `t = 0.25, 0.5, ..., 20`.
    pub fn cumulative(&self) -> Vec<(f64, Vec<f64>)> {
        let steps = (CURVE_MAX_VX / CURVE_STEP_VX).round() as usize;
        (1..=steps)
            .map(|i| {
                let t = i as f64 * CURVE_STEP_VX;
                (t, self.variants.iter().map(|&v| self.success_rate(v, t)).collect())
            })
            .collect()
    }
}

/// Per-trial search seed, independent of scheduling.
pub fn trial_search_seed(master: u64, index: usize) -> u64 {
    stream_rng(master, index as u64).next_u64()
}

/// Runs the global search for every trial and variant.
///
/// Trials run in parallel on the current rayon pool; each derives its own
/// search seed from `search.seed` and its index, so the records do not
/// depend on the thread count.
pub fn run_trials(
    engine: &FftEngine,
    cases: &[TrialCase],
    pyramid: &PyramidConfig,
    search: &SearchConfig,
    variants: &[Variant],
    threshold: f64,
) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::invalid("no trials to run"));
    }
    if variants.is_empty() {
        return Err(Error::invalid("no variants to run"));
    }
    let nested: Vec<Vec<TrialRecord>> = cases
        .par_iter()
        .map(|case| {
            let seed = trial_search_seed(search.seed, case.index);
            variants
                .iter()
                .map(|&variant| {
                    let cfg = variant.apply(SearchConfig { seed, ..*search });
                    let t = &case.trial;
                    let result = global_search(
                        engine,
                        (&t.reference, &t.reference_mask),
                        (&t.floating, &t.floating_mask),
                        pyramid,
                        &cfg,
                    )?;
                    let d_e = corner_error(&t.ground_truth, &result.transform, t.reference.dims());
                    Ok(TrialRecord {
                        trial: case.index,
                        seed: case.seed,
                        variant,
                        ground_truth: t.ground_truth,
                        recovered: result.transform,
                        d_e,
                        success: d_e < threshold,
                        time_s: result.wall_time_s,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        records: nested.into_iter().flatten().collect(),
        variants: variants.to_vec(),
        threshold,
    })
}

/// Everything needed to regenerate a trial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub trials: usize,
    pub seed: u64,
    /// Phantom recipe; its seed is replaced per trial.
    pub phantom: PhantomSpec,
    pub rotation_deg: [f64; 3],
    pub shift_vx: [i64; 3],
    pub block: Dims,
    #[serde(default = "default_gt_interpolation")]
    pub interpolation: Interpolation,
}

impl DatasetSpec {
    /// Full-range rotations, as in a global search task.
    pub fn default_preset() -> Self {
        DatasetSpec {
            trials: 20,
            seed: 0,
            phantom: PhantomSpec::default(),
            rotation_deg: [180.0; 3],
            shift_vx: [30; 3],
            block: Dims::cube(64),
            interpolation: Interpolation::Tricubic,
        }
    }

    /// Rotations within ±30° and shifts within ±15 voxels.
    pub fn reduced_preset() -> Self {
        DatasetSpec {
            rotation_deg: [30.0; 3],
            shift_vx: [15; 3],
            ..Self::default_preset()
        }
    }

    /// Small reduced-range set for quick end-to-end runs.
    pub fn smoke_preset() -> Self {
        DatasetSpec {
            trials: 2,
            phantom: PhantomSpec {
                dims: Dims::cube(56),
                head_radius: [14.5, 12.0, 10.0],
                blob_radius: [2.0, 4.5],
                ..PhantomSpec::default()
            },
            shift_vx: [6; 3],
            block: Dims::cube(32),
            ..Self::reduced_preset()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_preset()),
            "reduced" => Ok(Self::reduced_preset()),
            "smoke" => Ok(Self::smoke_preset()),
            _ => Err(Error::invalid(format!(
                "unknown preset {name:?} (expected default, reduced or smoke)"
            ))),
        }
    }

    /// Phantom and trial seeds for trial `index`.
    pub fn seeds(&self, index: usize) -> (u64, u64) {
        let mut rng = stream_rng(self.seed, index as u64);
        (rng.next_u64(), rng.next_u64())
    }

    /// Generates trial `index` in memory.
    pub fn make(&self, index: usize) -> Result<TrialCase> {
        let (phantom_seed, trial_seed) = self.seeds(index);
        let (a, b) = gen_phantom_pair(&PhantomSpec {
            seed: phantom_seed,
            ..self.phantom.clone()
        })?;
        let trial = make_trial(
            &a,
            &b,
            &TrialSpec {
                rotation_deg: self.rotation_deg,
                shift_vx: self.shift_vx,
                block: self.block,
                interpolation: self.interpolation,
                seed: trial_seed,
            },
        )?;
        Ok(TrialCase {
            index,
            seed: trial_seed,
            trial,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad dataset spec: {e}")))?;
        spec.phantom.validate()?;
        if spec.trials == 0 {
            return Err(Error::invalid("dataset needs at least one trial"));
        }
        Ok(spec)
    }
}

/// Name of the dataset manifest inside a dataset directory.
pub const MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub ground_truth: RigidTransform,
    pub reference: String,
    pub floating: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub trials: Vec<ManifestEntry>,
}

/// Writes every trial's volumes and a manifest with the ground truths.
pub fn write_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cases: Vec<TrialCase> = (0..spec.trials)
        .into_par_iter()
        .map(|i| spec.make(i))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in &cases {
        let reference = format!("trial_{:03}_reference.json", case.index);
        let floating = format!("trial_{:03}_floating.json", case.index);
        let t = &case.trial;
        save_volume(&t.reference, Some(&t.reference_mask), dir.join(&reference))?;
        save_volume(&t.floating, Some(&t.floating_mask), dir.join(&floating))?;
        entries.push(ManifestEntry {
            index: case.index,
            seed: case.seed,
            ground_truth: t.ground_truth,
            reference,
            floating,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        trials: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads the trials listed in a dataset directory's manifest.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<TrialCase>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.clone(),
        message: e.to_string(),
    })?;
    manifest
        .trials
        .iter()
        .map(|e| {
            let (reference, reference_mask) = load_volume(dir.join(&e.reference))?;
            let (floating, floating_mask) = load_volume(dir.join(&e.floating))?;
            Ok(TrialCase {
                index: e.index,
                seed: e.seed,
                trial: Trial {
                    reference,
                    reference_mask,
                    floating,
                    floating_mask,
                    ground_truth: e.ground_truth,
                },
            })
        })
        .collect()
}

/// Median timings of one benchmark size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub t_direct_s: f64,
    pub t_fft_s: f64,
    pub ratio: f64,
}

/// Largest cube side the direct method is run on by default.
pub const DEFAULT_DIRECT_CAP: usize = 64;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times the frequency-domain and the direct squared map on the same random
/// cube pairs; reports medians over `repeats` runs.
///
/// One untimed FFT run per size warms the plan cache.
pub fn bench_oracle(sizes: &[usize], repeats: usize, cap: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n > cap || n < 2) {
        return Err(Error::invalid(format!(
            "size {n} outside the benchmark range [2, {cap}]"
        )));
    }
    let engine = FftEngine::new();
    sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let dims = Dims::cube(n);
            let mut rng = stream_rng(seed, k as u64);
            let mut random = || Volume::from_fn(dims, |_, _, _| rng.gen_range(0.0..1.0));
            let (a, b) = (random(), random());
            let m = Mask::full(dims);
            let cfg = NgfConfig::default();
            let (na, nb) = (ngf(&a, &m, cfg)?, ngf(&b, &m, cfg)?);
            let gamma = crate::csngf::DEFAULT_GAMMA;
            let fft = || similarity_map_fft(&engine, &na, &m, &nb, &m, gamma, Measure::Squared);
            fft()?;
            let mut t_fft = Vec::with_capacity(repeats);
            let mut t_direct = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                fft()?;
                t_fft.push(t.elapsed().as_secs_f64());
                let t = Instant::now();
                csngf_map_direct(&na, &m, &nb, &m, gamma, Measure::Squared)?;
                t_direct.push(t.elapsed().as_secs_f64());
            }
            let (t_direct_s, t_fft_s) = (median(t_direct), median(t_fft));
            Ok(BenchRow {
                size: n,
                t_direct_s,
                t_fft_s,
                ratio: t_direct_s / t_fft_s,
            })
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn push3(row: &mut Vec<String>, v: [f64; 3]) {
    row.extend(v.iter().map(|x| x.to_string()));
}

pub const TRIALS_HEADER: [&str; 17] = [
    "seed",
    "gt_euler_x",
    "gt_euler_y",
    "gt_euler_z",
    "gt_shift_x",
    "gt_shift_y",
    "gt_shift_z",
    "rec_euler_x",
    "rec_euler_y",
    "rec_euler_z",
    "rec_shift_x",
    "rec_shift_y",
    "rec_shift_z",
    "d_e",
    "success",
    "time_s",
    "variant",
];

/// One row per record; vectors are split into per-axis columns and
/// `success` is written as 0 or 1.
pub fn write_trials_csv(path: impl AsRef<Path>, records: &[TrialRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(TRIALS_HEADER)?;
    for r in records {
        let mut row = vec![r.seed.to_string()];
        push3(&mut row, r.ground_truth.euler_deg);
        push3(&mut row, r.ground_truth.translation_vx);
        push3(&mut row, r.recovered.euler_deg);
        push3(&mut row, r.recovered.translation_vx);
        row.push(r.d_e.to_string());
        row.push((r.success as u8).to_string());
        row.push(r.time_s.to_string());
        row.push(r.variant.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cumulative_csv(path: impl AsRef<Path>, eval: &Evaluation) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(eval.variants.iter().map(|v| v.to_string()));
    w.write_record(&header)?;
    for (t, fractions) in eval.cumulative() {
        let mut row = vec![t.to_string()];
        row.extend(fractions.iter().map(|f| f.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_bench_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["size", "t_direct_s", "t_fft_s", "ratio"])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.t_direct_s.to_string(),
            r.t_fft_s.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Output file names written by an evaluation run.
pub fn evaluation_outputs(dir: &Path) -> [PathBuf; 2] {
    [dir.join("trials.csv"), dir.join("cumulative.csv")]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csngf::argmax_displacement;
    use proptest::prelude::*;

    fn small_phantom(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: Dims::cube(40),
            head_radius: [12.0, 10.0, 8.0],
            blobs: 8,
            blob_radius: [2.0, 4.0],
            seed,
            ..PhantomSpec::default()
        }
    }

    fn pearson(a: &Volume, b: &Volume) -> f64 {
        let n = a.data().len() as f64;
        let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn identical_tables_without_noise_give_identical_volumes() {
        let spec = PhantomSpec {
            intensities_b: PhantomSpec::default().intensities_a,
            noise_sigma: 0.0,
            smoothing: [1.0, 1.0],
            ..small_phantom(3)
        };
        let (a, b) = gen_phantom_pair(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverted_table_gives_inverted_volume() {
        let ta = PhantomSpec::default().intensities_a;
        let spec = PhantomSpec {
            intensities_b: ta.iter().map(|v| 2.0 - v).collect(),
            intensities_a: ta,
            noise_sigma: 0.0,
            smoothing: [0.0, 0.0],
            ..small_phantom(4)
        };
        let (a, b) = gen_phantom_pair(&spec).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - (2.0 - x)).abs() < 1e-6);
        }
    }

    #[test]
    fn phantom_is_seeded_and_validated() {
        assert_eq!(gen_phantom_pair(&small_phantom(5)).unwrap(), gen_phantom_pair(&small_phantom(5)).unwrap());
        assert_ne!(gen_phantom_pair(&small_phantom(5)).unwrap().0, gen_phantom_pair(&small_phantom(6)).unwrap().0);
        let bad = PhantomSpec { intensities_a: vec![0.0, 0.5, 0.5, 1.0, 0.2, 0.3], ..small_phantom(0) };
        assert!(gen_phantom_pair(&bad).is_err());
        let bad = PhantomSpec { intensities_a: vec![0.0], intensities_b: vec![1.0], ..small_phantom(0) };
        assert!(gen_phantom_pair(&bad).is_err());
        let bad = PhantomSpec { exponent_b: Some(0.5), intensities_b: vec![0.0, -1.0, 2.0, 3.0, 4.0, 5.0], ..small_phantom(0) };
        assert!(gen_phantom_pair(&bad).is_err());
    }

    #[test]
    fn default_phantom_is_multimodal_but_aligned() {
        let (a, b) = gen_phantom_pair(&PhantomSpec::default()).unwrap();
        assert!(pearson(&a, &b).abs() < 0.9, "rho = {}", pearson(&a, &b));

        let e = FftEngine::new();
        let m = Mask::full(a.dims());
        let cfg = NgfConfig::default();
        let na = ngf(&a, &m, cfg).unwrap();
        let score = |v: &Volume, mask: &Mask| {
            let nb = ngf(v, mask, cfg).unwrap();
            let map = similarity_map_fft(&e, &na, &m, &nb, mask, 0.5, Measure::Squared).unwrap();
            map.score([0, 0, 0]).unwrap()
        };
        let rot = RigidTransform::rotation_about([0.0, 0.0, 10.0], a.dims().center());
        let (rb, rm) = apply_rigid(&b, &m, &rot, Interpolation::Trilinear).unwrap();
        assert!(score(&b, &m) > score(&rb, &rm));
    }

    fn trial_spec(seed: u64) -> TrialSpec {
        TrialSpec {
            rotation_deg: [30.0; 3],
            shift_vx: [5; 3],
            block: Dims::cube(24),
            interpolation: Interpolation::Tricubic,
            seed,
        }
    }

    #[test]
    fn zero_range_trial_is_a_plain_crop() {
        let (a, b) = gen_phantom_pair(&small_phantom(1)).unwrap();
        let spec = TrialSpec { rotation_deg: [0.0; 3], shift_vx: [0; 3], ..trial_spec(0) };
        let t = make_trial(&a, &b, &spec).unwrap();
        assert_eq!(t.ground_truth.euler_deg, [0.0; 3]);
        assert_eq!(t.ground_truth.translation_vx, [0.0; 3]);
        assert_eq!(t.reference, a.crop([8; 3], Dims::cube(24)).unwrap());
        assert_eq!(t.floating, b.crop([8; 3], Dims::cube(24)).unwrap());
        assert!(t.reference_mask.is_full());
    }

    #[test]
    fn pure_shift_trial_is_recovered_exactly() {
        let (a, b) = gen_phantom_pair(&small_phantom(2)).unwrap();
        let spec = TrialSpec { rotation_deg: [0.0; 3], shift_vx: [5; 3], ..trial_spec(9) };
        let t = make_trial(&a, &b, &spec).unwrap();
        let s = t.ground_truth.translation_vx;
        // reference(x) = A(x + s) on the block, so the reference is A shifted
        for x in 0..24usize {
            let src = x as i64 + 8 + s[0] as i64;
            let expected = a.get(src as usize, (12 + 8 + s[1] as i64) as usize, (12 + 8 + s[2] as i64) as usize);
            assert_eq!(t.reference.get(x, 12, 12), expected);
        }
        // the search lattice finds that shift at zero rotation
        let e = FftEngine::new();
        let cfg = NgfConfig::default();
        let ma = &t.reference_mask;
        let na = ngf(&t.reference, ma, cfg).unwrap();
        let nb = ngf(&t.floating, &t.floating_mask, cfg).unwrap();
        let map = similarity_map_fft(&e, &na, ma, &nb, &t.floating_mask, 0.5, Measure::Squared).unwrap();
        let (chi, _) = argmax_displacement(&map).unwrap();
        let recovered = RigidTransform::new([0.0; 3], chi.map(|c| c as f64), Dims::cube(24).center());
        assert_eq!(corner_error(&t.ground_truth, &recovered, Dims::cube(24)), 0.0);
    }

    #[test]
    fn trials_are_seeded_and_checked() {
        let (a, b) = gen_phantom_pair(&small_phantom(2)).unwrap();
        assert_eq!(make_trial(&a, &b, &trial_spec(4)).unwrap(), make_trial(&a, &b, &trial_spec(4)).unwrap());
        let too_big = TrialSpec { block: Dims::cube(41), ..trial_spec(0) };
        assert!(make_trial(&a, &b, &too_big).is_err());
        let neg = TrialSpec { shift_vx: [-1, 0, 0], ..trial_spec(0) };
        assert!(make_trial(&a, &b, &neg).is_err());
    }

    #[test]
    fn ground_truth_bookkeeping_is_consistent() {
        // same radiometry in both modalities, so only noise and interpolation differ
        let sigma = 0.02;
        let spec = PhantomSpec {
            intensities_b: PhantomSpec::default().intensities_a,
            smoothing: [1.0, 1.0],
            noise_sigma: sigma,
            ..small_phantom(8)
        };
        let (a, b) = gen_phantom_pair(&spec).unwrap();
        for seed in 0..4 {
            let t = make_trial(&a, &b, &trial_spec(seed)).unwrap();
            let (warped, wm) =
                apply_rigid(&t.floating, &t.floating_mask, &t.ground_truth, Interpolation::Tricubic).unwrap();
            let (mut sum, mut n) = (0.0, 0usize);
            for i in 0..warped.data().len() {
                if wm.bits()[i] && t.reference_mask.bits()[i] {
                    sum += (warped.data()[i] - t.reference.data()[i]).abs() as f64;
                    n += 1;
                }
            }
            assert!(n > 1000);
            assert!(sum / (n as f64) < 3.0 * sigma, "seed {seed}: {}", sum / n as f64);
        }
    }

    #[test]
    fn corner_error_examples() {
        let block = Dims::cube(10);
        let id = RigidTransform::rotation_about([0.0; 3], block.center());
        assert_eq!(corner_error(&id, &id, block), 0.0);
        let shift = RigidTransform::new([0.0; 3], [3.0, 4.0, 0.0], block.center());
        assert_eq!(corner_error(&id, &shift, block), 5.0);

        // 90° about z through the origin corner: |R p - p| = sqrt(2) * |(x, y)|
        let l = 7.0;
        let rot = RigidTransform::rotation_about([0.0, 0.0, 90.0], [0.0; 3]);
        let expected = (l - 1.0) * (2f64.sqrt() + 1.0) / 2.0;
        let d = corner_error(&RigidTransform::identity(), &rot, Dims::cube(l as usize));
        assert!((d - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn corner_error_is_a_pseudometric(
            a in proptest::array::uniform3(-180.0f64..180.0),
            b in proptest::array::uniform3(-180.0f64..180.0),
            c in proptest::array::uniform3(-180.0f64..180.0),
            ta in proptest::array::uniform3(-20.0f64..20.0),
            tb in proptest::array::uniform3(-20.0f64..20.0),
            tc in proptest::array::uniform3(-20.0f64..20.0),
        ) {
            let block = Dims::new(16, 20, 12);
            let ctr = block.center();
            let (x, y, z) = (
                RigidTransform::new(a, ta, ctr),
                RigidTransform::new(b, tb, ctr),
                RigidTransform::new(c, tc, [0.0; 3]),
            );
            prop_assert!(corner_error(&x, &x, block).abs() < 1e-12);
            prop_assert!((corner_error(&x, &y, block) - corner_error(&y, &x, block)).abs() < 1e-12);
            prop_assert!(corner_error(&x, &z, block) <= corner_error(&x, &y, block) + corner_error(&y, &z, block) + 1e-9);
        }
    }

    fn record(variant: Variant, d_e: f64) -> TrialRecord {
        TrialRecord {
            trial: 0,
            seed: 0,
            variant,
            ground_truth: RigidTransform::identity(),
            recovered: RigidTransform::identity(),
            d_e,
            success: d_e < SUCCESS_THRESHOLD_VX,
            time_s: 0.0,
        }
    }

    #[test]
    fn cumulative_curve_is_a_cdf() {
        let eval = Evaluation {
            records: [0.1, 4.9, 5.0, 7.5, 19.0, 30.0]
                .iter()
                .map(|&d| record(Variant::Squared, d))
                .chain([record(Variant::UnsquaredInverted, 50.0)])
                .collect(),
            variants: vec![Variant::Squared, Variant::UnsquaredInverted],
            threshold: SUCCESS_THRESHOLD_VX,
        };
        let curve = eval.cumulative();
        assert_eq!(curve.len(), 80);
        assert_eq!(curve[0].0, 0.25);
        assert_eq!(curve[79].0, 20.0);
        for w in curve.windows(2) {
            for v in 0..2 {
                assert!(w[1].1[v] >= w[0].1[v]);
            }
        }
        assert_eq!(curve[79].1[0], eval.success_rate(Variant::Squared, 20.0));
        assert_eq!(eval.success_rate(Variant::Squared, 5.0), 2.0 / 6.0);
        assert_eq!(eval.successes(Variant::Squared), 2);
        assert_eq!(eval.success_rate(Variant::UnsquaredInverted, 20.0), 0.0);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
        assert!("inverted".parse::<Variant>().is_err());
        assert_eq!(Variant::from_options(Measure::Unsquared, true), Variant::UnsquaredInverted);
    }

    #[test]
    fn zero_displacement_trial_succeeds() {
        let (a, _) = gen_phantom_pair(&small_phantom(3)).unwrap();
        let spec = TrialSpec { rotation_deg: [0.0; 3], shift_vx: [0; 3], ..trial_spec(0) };
        let trial = make_trial(&a, &a, &spec).unwrap();
        let pyramid = PyramidConfig { d: vec![2, 1], sigma: vec![1.0, 0.0], u: vec![10.0, 0.0], a: vec![4, 0], p: vec![1, 1] };
        let eval = run_trials(
            &FftEngine::new(),
            &[TrialCase { index: 0, seed: 0, trial }],
            &pyramid,
            &SearchConfig::default(),
            &[Variant::Squared],
            SUCCESS_THRESHOLD_VX,
        )
        .unwrap();
        assert_eq!(eval.success_rate(Variant::Squared, SUCCESS_THRESHOLD_VX), 1.0);
    }

    #[test]
    fn csv_outputs_have_headers_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let eval = Evaluation {
            records: vec![record(Variant::Squared, 1.5)],
            variants: vec![Variant::Squared],
            threshold: SUCCESS_THRESHOLD_VX,
        };
        let [trials, cumulative] = evaluation_outputs(dir.path());
        write_trials_csv(&trials, &eval.records).unwrap();
        write_cumulative_csv(&cumulative, &eval).unwrap();
        let text = fs::read_to_string(&trials).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRIALS_HEADER.join(","));
        assert_eq!(lines[1], "0,0,0,0,0,0,0,0,0,0,0,0,0,1.5,1,0,squared");
        assert!(text.ends_with('\n'));
        let text = fs::read_to_string(&cumulative).unwrap();
        assert_eq!(text.lines().count(), 81);
        assert_eq!(text.lines().next().unwrap(), "t,squared");

        let bench = dir.path().join("bench.csv");
        write_bench_csv(&bench, &[BenchRow { size: 8, t_direct_s: 0.5, t_fft_s: 0.25, ratio: 2.0 }]).unwrap();
        assert_eq!(fs::read_to_string(&bench).unwrap(), "size,t_direct_s,t_fft_s,ratio\n8,0.5,0.25,2\n");
    }

    #[test]
    fn small_bench_runs() {
        let rows = bench_oracle(&[8, 10], 1, DEFAULT_DIRECT_CAP, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.t_fft_s > 0.0 && r.t_direct_s > 0.0));
        assert!(bench_oracle(&[65], 1, DEFAULT_DIRECT_CAP, 0).is_err());
        assert!(bench_oracle(&[8], 0, DEFAULT_DIRECT_CAP, 0).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            trials: 2,
            phantom: small_phantom(0),
            block: Dims::cube(20),
            shift_vx: [3; 3],
            ..DatasetSpec::reduced_preset()
        };
        let manifest = write_dataset(&spec, dir.path()).unwrap();
        assert_eq!(manifest.trials.len(), 2);
        let cases = read_dataset(dir.path()).unwrap();
        assert_eq!(cases.len(), 2);
        for (i, case) in cases.iter().enumerate() {
            assert_eq!(case, &spec.make(i).unwrap());
        }
        assert!(read_dataset(dir.path().join("missing")).is_err());
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(DatasetSpec::from_json(&text).unwrap(), spec);
        assert!(DatasetSpec::preset("smoke").is_ok());
        assert!(DatasetSpec::preset("huge").is_err());
    }
}
