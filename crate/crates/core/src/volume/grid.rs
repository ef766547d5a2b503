use crate::error::{Error, Result};

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub const fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of `(x, y, z)` in x-fastest order.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.0[1] + y) * self.0[0] + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[0];
        let r = i / self.0[0];
        [x, r % self.0[1], r / self.0[1]]
    }

    #[inline]
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.0[a])
    }

    /// Geometric center `((nx-1)/2, (ny-1)/2, (nz-1)/2)`.
    pub fn center(&self) -> [f64; 3] {
        self.0.map(|n| (n as f64 - 1.0) / 2.0)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Dense scalar volume stored in x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume with unit spacing. Fails on size mismatch or non-finite data.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.0.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("zero-sized dims {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::PayloadSizeMismatch {
                expected: dims.len() * 4,
                found: data.len() * 4,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
        }
    }

    /// Evaluates `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Element-wise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Intensity inversion `v -> -v`.
    pub fn negated(&self) -> Volume {
        self.map(|v| -v)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copies the block starting at `offset` with extent `block`.
    pub fn crop(&self, offset: [usize; 3], block: Dims) -> Result<Volume> {
        check_crop(self.dims, offset, block)?;
        let data = crop_slice(&self.data, self.dims, offset, block);
        Ok(Volume {
            dims: block,
            spacing: self.spacing,
            data,
        })
    }

    pub(crate) fn from_parts(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Volume {
            dims,
            spacing,
            data,
        }
    }
}

/// Binary voxel mask sharing the lattice of a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    /// Rejects masks with no voxel set.
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::DimsMismatch(format!(
                "mask has {} voxels, dims {dims} need {}",
                bits.len(),
                dims.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Mask { dims, bits })
    }

    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            bits: vec![true; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(dims.len());
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    bits.push(f(x, y, z));
                }
            }
        }
        Mask::new(dims, bits)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn crop(&self, offset: [usize; 3], block: Dims) -> Result<Mask> {
        check_crop(self.dims, offset, block)?;
        Mask::new(block, crop_slice(&self.bits, self.dims, offset, block))
    }

    /// Mask without the non-empty check; used where emptiness is reported later.
    pub(crate) fn from_bits_unchecked(dims: Dims, bits: Vec<bool>) -> Self {
        debug_assert_eq!(dims.len(), bits.len());
        Mask { dims, bits }
    }
}

pub(crate) fn ensure_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

fn check_crop(dims: Dims, offset: [usize; 3], block: Dims) -> Result<()> {
    if (0..3).any(|a| offset[a] + block.0[a] > dims.0[a]) || block.is_empty() {
        return Err(Error::invalid(format!(
            "block {block} at offset {offset:?} does not fit in {dims}"
        )));
    }
    Ok(())
}

fn crop_slice<T: Copy>(src: &[T], dims: Dims, offset: [usize; 3], block: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(block.len());
    for z in 0..block.nz() {
        for y in 0..block.ny() {
            let start = dims.index(offset[0], offset[1] + y, offset[2] + z);
            out.extend_from_slice(&src[start..start + block.nx()]);
        }
    }
    out
}
