//! Gradients, regularized normalized gradient fields and pointwise /
//! averaged NGF similarities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ensure_same_dims, Dims, Mask, Volume};

/// Regularization used by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgfConfig {
    pub epsilon: f64,
}

impl NgfConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(NgfConfig { epsilon })
    }
}

impl Default for NgfConfig {
    fn default() -> Self {
        NgfConfig {
            epsilon: Self::DEFAULT_EPSILON,
        }
    }
}

/// Three scalar components per voxel, x-fastest like [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dims: Dims,
    comps: [Vec<f64>; 3],
}

impl VectorField {
    pub fn zeros(dims: Dims) -> Self {
        VectorField {
            dims,
            comps: std::array::from_fn(|_| vec![0.0; dims.len()]),
        }
    }

    pub fn from_components(dims: Dims, comps: [Vec<f64>; 3]) -> Result<Self> {
        if comps.iter().any(|c| c.len() != dims.len()) {
            return Err(Error::DimsMismatch(format!(
                "vector field components do not match {dims}"
            )));
        }
        if let Some(index) = comps
            .iter()
            .flat_map(|c| c.iter().enumerate())
            .find(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
        {
            return Err(Error::NonFinite { index });
        }
        Ok(VectorField { dims, comps })
    }

    /// Same vector at every voxel.
    pub fn uniform(dims: Dims, v: [f64; 3]) -> Self {
        VectorField {
            dims,
            comps: v.map(|c| vec![c; dims.len()]),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.comps[i]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.comps
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    pub fn negated(&self) -> Self {
        VectorField {
            dims: self.dims,
            comps: self.comps.clone().map(|c| c.into_iter().map(|v| -v).collect()),
        }
    }
}

/// Central differences in the interior, one-sided at the grid border.
///
/// The gradient is the zero vector wherever the stencil touches an unmasked
/// voxel (including the voxel itself).
pub fn gradient(v: &Volume, m: &Mask) -> Result<VectorField> {
    ensure_same_dims(v.dims(), m.dims(), "gradient")?;
    let dims = v.dims();
    if dims.0.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "gradient needs at least 2 voxels per axis, got {dims}"
        )));
    }
    let data = v.data();
    let bits = m.bits();
    let strides = [1, dims.nx(), dims.nx() * dims.ny()];
    let mut field = VectorField::zeros(dims);
    for z in 0..dims.nz() {
        for y in 0..dims.ny() {
            for x in 0..dims.nx() {
                let i = dims.index(x, y, z);
                if !bits[i] {
                    continue;
                }
                let pos = [x, y, z];
                let mut g = [0.0; 3];
                let mut ok = true;
                for a in 0..3 {
                    let n = dims.0[a];
                    let s = strides[a];
                    let (lo, hi, scale) = if pos[a] == 0 {
                        (i, i + s, 1.0)
                    } else if pos[a] == n - 1 {
                        (i - s, i, 1.0)
                    } else {
                        (i - s, i + s, 0.5)
                    };
                    if !bits[lo] || !bits[hi] {
                        ok = false;
                        break;
                    }
                    g[a] = scale * (data[hi] as f64 - data[lo] as f64);
                }
                if ok {
                    for a in 0..3 {
                        field.comps[a][i] = g[a];
                    }
                }
            }
        }
    }
    Ok(field)
}

/// Per voxel `g / sqrt(|g|^2 + eps^2)`.
pub fn normalize(g: &VectorField, cfg: NgfConfig) -> VectorField {
    let eps2 = cfg.epsilon * cfg.epsilon;
    let n = g.dims.len();
    let mut out = VectorField::zeros(g.dims);
    for i in 0..n {
        let v = g.at(i);
        let norm2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if norm2 == 0.0 {
            continue;
        }
        let inv = 1.0 / (norm2 + eps2).sqrt();
        for a in 0..3 {
            out.comps[a][i] = v[a] * inv;
        }
    }
    out
}

/// Normalized gradient field of a masked volume.
pub fn ngf(v: &Volume, m: &Mask, cfg: NgfConfig) -> Result<VectorField> {
    Ok(normalize(&gradient(v, m)?, cfg))
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Squared dot product: 1 for (anti-)parallel unit vectors, 0 for orthogonal.
#[inline]
pub fn sngf_point(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = dot(a, b);
    d * d
}

/// Signed dot product; contrast inversion flips its sign.
#[inline]
pub fn usngf_point(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(a, b)
}

/// Pointwise NGF similarity variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Squared dot product (sign-invariant).
    #[default]
    Squared,
    /// Unsquared dot product (sign-sensitive).
    Unsquared,
}

impl Measure {
    #[inline]
    pub fn point(self, a: [f64; 3], b: [f64; 3]) -> f64 {
        match self {
            Measure::Squared => sngf_point(a, b),
            Measure::Unsquared => usngf_point(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Squared => "squared",
            Measure::Unsquared => "unsquared",
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Measure::Squared),
            "unsquared" => Ok(Measure::Unsquared),
            other => Err(Error::invalid(format!("unknown measure {other:?}"))),
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean NGF similarity over the intersection of both masks at zero displacement.
pub fn angf(
    a: &Volume,
    b: &Volume,
    mask_a: &Mask,
    mask_b: &Mask,
    cfg: NgfConfig,
    measure: Measure,
) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims(), "angf volumes")?;
    ensure_same_dims(a.dims(), mask_a.dims(), "angf mask A")?;
    ensure_same_dims(a.dims(), mask_b.dims(), "angf mask B")?;
    let na = ngf(a, mask_a, cfg)?;
    let nb = ngf(b, mask_b, cfg)?;
    angf_fields(&na, &nb, mask_a, mask_b, measure)
}

/// [`angf`] on precomputed NGF fields.
pub fn angf_fields(
    na: &VectorField,
    nb: &VectorField,
    mask_a: &Mask,
    mask_b: &Mask,
    measure: Measure,
) -> Result<f64> {
    ensure_same_dims(na.dims(), nb.dims(), "angf fields")?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..na.dims().len() {
        if mask_a.bits()[i] && mask_b.bits()[i] {
            sum += measure.point(na.at(i), nb.at(i));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyIntersection);
    }
    Ok(sum / count as f64)
}
