//! Trilinear / tricubic sampling with mask validity, and rigid warping by
//! inverse mapping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{ensure_same_dims, Mask, Volume};
use super::transform::RigidTransform;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Trilinear,
    /// Separable Catmull-Rom with 4 support voxels per axis.
    Tricubic,
}

/// Support along one axis: (index, weight) pairs, nonzero weights only.
#[derive(Clone, Copy)]
struct Taps {
    idx: [i64; 4],
    w: [f64; 4],
    len: usize,
}

impl Taps {
    fn new() -> Self {
        Taps {
            idx: [0; 4],
            w: [0.0; 4],
            len: 0,
        }
    }

    #[inline]
    fn push(&mut self, i: i64, w: f64) {
        if w != 0.0 {
            self.idx[self.len] = i;
            self.w[self.len] = w;
            self.len += 1;
        }
    }
}

#[inline]
fn linear_taps(p: f64) -> Taps {
    let i0 = p.floor();
    let f = p - i0;
    let mut t = Taps::new();
    t.push(i0 as i64, 1.0 - f);
    t.push(i0 as i64 + 1, f);
    t
}

#[inline]
fn cubic_taps(p: f64) -> Taps {
    let i0 = p.floor();
    let f = p - i0;
    let i0 = i0 as i64;
    let mut t = Taps::new();
    if f == 0.0 {
        t.push(i0, 1.0);
        return t;
    }
    let f2 = f * f;
    let f3 = f2 * f;
    t.push(i0 - 1, 0.5 * (-f3 + 2.0 * f2 - f));
    t.push(i0, 0.5 * (3.0 * f3 - 5.0 * f2 + 2.0));
    t.push(i0 + 1, 0.5 * (-3.0 * f3 + 4.0 * f2 + f));
    t.push(i0 + 2, 0.5 * (f3 - f2));
    t
}

#[inline]
fn sample_with(v: &Volume, m: &Mask, taps: [Taps; 3]) -> Option<f64> {
    let dims = v.dims();
    let n = dims.0.map(|n| n as i64);
    for a in 0..3 {
        let t = &taps[a];
        if t.idx[..t.len].iter().any(|&i| i < 0 || i >= n[a]) {
            return None;
        }
    }
    let data = v.data();
    let bits = m.bits();
    let mut acc = 0.0;
    for k in 0..taps[2].len {
        let z = taps[2].idx[k] as usize;
        let wz = taps[2].w[k];
        for j in 0..taps[1].len {
            let y = taps[1].idx[j] as usize;
            let wzy = wz * taps[1].w[j];
            let row = dims.index(0, y, z);
            for i in 0..taps[0].len {
                let idx = row + taps[0].idx[i] as usize;
                if !bits[idx] {
                    return None;
                }
                acc += wzy * taps[0].w[i] * data[idx] as f64;
            }
        }
    }
    Some(acc)
}

/// Trilinear sample at a continuous voxel coordinate.
///
/// Returns `(value, valid)`; a sample is invalid when any lattice neighbor
/// carrying nonzero weight is outside the grid or unmasked. On exact lattice
/// coordinates only the node itself is needed.
pub fn trilinear_sample(v: &Volume, m: &Mask, p: [f64; 3]) -> (f64, bool) {
    if !p.iter().all(|c| c.is_finite()) {
        return (0.0, false);
    }
    match sample_with(v, m, p.map(linear_taps)) {
        Some(x) => (x, true),
        None => (0.0, false),
    }
}

/// Catmull-Rom tricubic sample; validity rule as for [`trilinear_sample`].
pub fn tricubic_sample(v: &Volume, m: &Mask, p: [f64; 3]) -> (f64, bool) {
    if !p.iter().all(|c| c.is_finite()) {
        return (0.0, false);
    }
    match sample_with(v, m, p.map(cubic_taps)) {
        Some(x) => (x, true),
        None => (0.0, false),
    }
}

/// Resamples `v` so that output voxel `x` holds the value at `T(x)`.
///
/// The output lattice equals the input lattice. Invalid samples become 0 with
/// the mask bit cleared.
pub fn apply_rigid(
    v: &Volume,
    m: &Mask,
    t: &RigidTransform,
    interp: Interpolation,
) -> Result<(Volume, Mask)> {
    ensure_same_dims(v.dims(), m.dims(), "apply_rigid")?;
    let dims = v.dims();
    let r = t.matrix();
    let slab = dims.nx() * dims.ny();
    let mut data = vec![0.0f32; dims.len()];
    let mut bits = vec![false; dims.len()];
    data.par_chunks_mut(slab)
        .zip(bits.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(z, (dslab, bslab))| {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    let p = t.apply_with(&r, [x as f64, y as f64, z as f64]);
                    let (val, ok) = match interp {
                        Interpolation::Trilinear => trilinear_sample(v, m, p),
                        Interpolation::Tricubic => tricubic_sample(v, m, p),
                    };
                    let i = y * dims.nx() + x;
                    if ok {
                        dslab[i] = val as f32;
                        bslab[i] = true;
                    }
                }
            }
        });
    Ok((
        Volume::from_parts(dims, v.spacing(), data),
        Mask::from_bits_unchecked(dims, bits),
    ))
}
