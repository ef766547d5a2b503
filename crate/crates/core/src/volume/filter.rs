//! Gaussian smoothing and masked block-mean downsampling for the pyramid.

use rayon::prelude::*;

use super::grid::{ensure_same_dims, Dims, Mask, Volume};
use crate::error::{Error, Result};

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with edge replication. `sigma == 0` is the identity.
pub fn gaussian_smooth(v: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let taps = gaussian_kernel(sigma);
    let dims = v.dims();
    let mut buf: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        buf = blur_axis(&buf, dims, axis, &taps);
    }
    Ok(Volume::from_parts(
        dims,
        v.spacing(),
        buf.into_iter().map(|x| x as f32).collect(),
    ))
}

fn blur_axis(src: &[f64], dims: Dims, axis: usize, taps: &[f64]) -> Vec<f64> {
    let n = dims.0[axis];
    let radius = (taps.len() / 2) as i64;
    let stride = match axis {
        0 => 1,
        1 => dims.nx(),
        _ => dims.nx() * dims.ny(),
    };
    let slab = dims.nx() * dims.ny();
    let mut out = vec![0.0; src.len()];
    let mut line = vec![0.0; n];
    // Each z-slab is independent for x/y passes; the z pass walks columns.
    if axis < 2 {
        out.par_chunks_mut(slab)
            .zip(src.par_chunks(slab))
            .for_each_init(
                || vec![0.0; n],
                |line, (dst, s)| {
                    let lines = if axis == 0 { dims.ny() } else { dims.nx() };
                    for l in 0..lines {
                        let base = if axis == 0 { l * dims.nx() } else { l };
                        for (i, slot) in line.iter_mut().enumerate() {
                            *slot = s[base + i * stride];
                        }
                        for i in 0..n {
                            dst[base + i * stride] = convolve_at(line, i as i64, radius, taps);
                        }
                    }
                },
            );
    } else {
        for base in 0..slab {
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = src[base + i * stride];
            }
            for i in 0..n {
                out[base + i * stride] = convolve_at(&line, i as i64, radius, taps);
            }
        }
    }
    out
}

#[inline]
fn convolve_at(line: &[f64], i: i64, radius: i64, taps: &[f64]) -> f64 {
    let last = line.len() as i64 - 1;
    taps.iter()
        .enumerate()
        .map(|(t, w)| {
            let j = (i + t as i64 - radius).clamp(0, last);
            w * line[j as usize]
        })
        .sum()
}

/// Masked block-mean decimation by an integer factor.
///
/// Output dims are `ceil(dims / factor)`. Each output voxel averages the
/// masked voxels of its (possibly border-clipped) block; its mask bit is set
/// when at least half of the block's voxels are masked.
pub fn downsample(v: &Volume, m: &Mask, factor: usize) -> Result<(Volume, Mask)> {
    ensure_same_dims(v.dims(), m.dims(), "downsample")?;
    if factor == 0 {
        return Err(Error::invalid("downsampling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok((v.clone(), m.clone()));
    }
    let dims = v.dims();
    let out_dims = Dims(dims.0.map(|n| n.div_ceil(factor)));
    let mut data = Vec::with_capacity(out_dims.len());
    let mut bits = Vec::with_capacity(out_dims.len());
    for oz in 0..out_dims.nz() {
        for oy in 0..out_dims.ny() {
            for ox in 0..out_dims.nx() {
                let (mut sum, mut masked, mut total) = (0.0f64, 0usize, 0usize);
                for z in oz * factor..((oz + 1) * factor).min(dims.nz()) {
                    for y in oy * factor..((oy + 1) * factor).min(dims.ny()) {
                        for x in ox * factor..((ox + 1) * factor).min(dims.nx()) {
                            total += 1;
                            let i = dims.index(x, y, z);
                            if m.bits()[i] {
                                masked += 1;
                                sum += v.data()[i] as f64;
                            }
                        }
                    }
                }
                data.push(if masked > 0 {
                    (sum / masked as f64) as f32
                } else {
                    0.0
                });
                bits.push(2 * masked >= total);
            }
        }
    }
    let spacing = v.spacing().map(|s| s * factor as f64);
    Ok((
        Volume::from_parts(out_dims, spacing, data),
        Mask::from_bits_unchecked(out_dims, bits),
    ))
}
