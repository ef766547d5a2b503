//! Real-input 3D cross-correlation in the frequency domain.
//!
//! A grid is zero-padded to a size that avoids circular wraparound, the x
//! axis is transformed real-to-complex, then y and z are transformed with
//! complex FFTs. Spectra are kept in a `[y][x][z]` layout (z fastest) so the
//! z pass runs on contiguous rows and every other pass stays within one
//! slab; only [`FftEngine::inverse`] needs to know about it.
//!
//! Correlation follows `c(χ) = Σ_x f(x) g(x + χ)`, computed as
//! `IFFT(conj(F) · G)`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Smallest `n' >= n` whose only prime factors are 2, 3 and 5.
pub fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Padded dims for the full linear correlation of grids of dims `a` and `b`.
pub fn padded_dims(a: Dims, b: Dims) -> Dims {
    Dims([0, 1, 2].map(|i| fast_len(a.0[i] + b.0[i] - 1)))
}

/// Forward and inverse transform counts since construction or the last reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FftCounts {
    pub forward: usize,
    pub inverse: usize,
}

struct PlanCache {
    real: RealFftPlanner<f64>,
    complex: FftPlanner<f64>,
    r2c: HashMap<usize, Arc<dyn RealToComplex<f64>>>,
    c2r: HashMap<usize, Arc<dyn ComplexToReal<f64>>>,
    fwd: HashMap<usize, Arc<dyn Fft<f64>>>,
    inv: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl Default for PlanCache {
    fn default() -> Self {
        PlanCache {
            real: RealFftPlanner::new(),
            complex: FftPlanner::new(),
            r2c: HashMap::new(),
            c2r: HashMap::new(),
            fwd: HashMap::new(),
            inv: HashMap::new(),
        }
    }
}

/// Shared transform backend: plan cache plus instrumentation counters.
///
/// Safe to share across threads; plans are created under a lock and used
/// without it.
#[derive(Default)]
pub struct FftEngine {
    plans: Mutex<PlanCache>,
    forward: AtomicUsize,
    inverse: AtomicUsize,
    // Recycled work buffers. Fresh multi-megabyte allocations cost more in
    // page faults than the transforms themselves.
    complex_pool: Mutex<Vec<Vec<Complex64>>>,
}

const POOL_CAP: usize = 24;

/// A buffer of length `len` whose contents are unspecified when recycled.
fn take_from<T: Copy>(pool: &Mutex<Vec<Vec<T>>>, len: usize, fill: T) -> Vec<T> {
    let found = {
        let mut p = pool.lock().unwrap();
        p.iter().position(|v| v.len() == len).map(|i| p.swap_remove(i))
    };
    found.unwrap_or_else(|| vec![fill; len])
}

fn give_to<T>(pool: &Mutex<Vec<Vec<T>>>, v: Vec<T>) {
    let mut p = pool.lock().unwrap();
    if p.len() < POOL_CAP {
        p.push(v);
    }
}

/// Transform of a zero-padded real grid.
#[derive(Clone)]
pub struct Spectrum {
    source: Dims,
    padded: Dims,
    data: Vec<Complex64>,
}

impl std::fmt::Debug for Spectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectrum")
            .field("source", &self.source)
            .field("padded", &self.padded)
            .finish_non_exhaustive()
    }
}

impl Spectrum {
    pub fn source_dims(&self) -> Dims {
        self.source
    }

    pub fn padded_dims(&self) -> Dims {
        self.padded
    }

    /// Coefficients in `[y][x][z]` (z-fastest) order, x running over `px/2 + 1` bins.
    pub fn coefficients(&self) -> &[Complex64] {
        &self.data
    }
}

/// Correlation values over the displacement lattice.
///
/// For `f` with dims `nA` and `g` with dims `nB` the lattice spans
/// `χ ∈ [-(nA-1), nB-1]` per axis; `origin` is the lattice index of `χ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGrid {
    dims: Dims,
    origin: [usize; 3],
    values: Vec<f64>,
}

impl CorrelationGrid {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn origin(&self) -> [usize; 3] {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn chi_of(&self, index: usize) -> [i64; 3] {
        let c = self.dims.coords(index);
        [0, 1, 2].map(|a| c[a] as i64 - self.origin[a] as i64)
    }

    pub fn index_of(&self, chi: [i64; 3]) -> Option<usize> {
        let p = [0, 1, 2].map(|a| chi[a] + self.origin[a] as i64);
        self.dims
            .contains(p)
            .then(|| self.dims.index(p[0] as usize, p[1] as usize, p[2] as usize))
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, chi: [i64; 3]) -> Option<f64> {
        self.index_of(chi).map(|i| self.values[i])
    }
}

/// Frequency-domain sum of weighted cross-power spectra.
pub struct Accumulator {
    a_dims: Dims,
    b_dims: Dims,
    padded: Dims,
    acc: Vec<Complex64>,
    terms: usize,
}

impl Accumulator {
    pub fn new(a_dims: Dims, b_dims: Dims, padded: Dims) -> Self {
        let len = (padded.nx() / 2 + 1) * padded.ny() * padded.nz();
        Accumulator {
            a_dims,
            b_dims,
            padded,
            acc: vec![Complex64::new(0.0, 0.0); len],
            terms: 0,
        }
    }

    fn check(&self, fa: Dims, fp: Dims, gb: Dims, gp: Dims) -> Result<()> {
        if fp != self.padded || gp != self.padded {
            return Err(Error::DimsMismatch(format!(
                "spectra padded to {fp} / {gp}, accumulator expects {}",
                self.padded
            )));
        }
        if fa != self.a_dims || gb != self.b_dims {
            return Err(Error::DimsMismatch(format!(
                "spectra of {fa} / {gb}, accumulator expects {} / {}",
                self.a_dims, self.b_dims
            )));
        }
        Ok(())
    }

    /// Adds `weight · conj(f) · g`.
    pub fn add(&mut self, f: &Spectrum, g: &Spectrum, weight: f64) -> Result<()> {
        self.check(f.source, f.padded, g.source, g.padded)?;
        let first = self.terms == 0;
        self.acc
            .par_chunks_mut(CHUNK)
            .zip(f.data.par_chunks(CHUNK))
            .zip(g.data.par_chunks(CHUNK))
            .for_each(|((acc, fc), gc)| accumulate(acc, fc, gc, weight, first));
        self.terms += 1;
        Ok(())
    }

    pub fn terms(&self) -> usize {
        self.terms
    }
}

const CHUNK: usize = 1 << 14;

impl FftEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> FftCounts {
        FftCounts {
            forward: self.forward.load(Ordering::Relaxed),
            inverse: self.inverse.load(Ordering::Relaxed),
        }
    }

    /// Hands a spectrum's storage back for reuse by later transforms.
    pub fn recycle(&self, spectrum: Spectrum) {
        give_to(&self.complex_pool, spectrum.data);
    }

    /// An empty accumulator backed by recycled storage.
    pub fn accumulator(&self, a_dims: Dims, b_dims: Dims, padded: Dims) -> Accumulator {
        let len = (padded.nx() / 2 + 1) * padded.ny() * padded.nz();
        // Stale contents are fine: the first term overwrites them.
        Accumulator {
            a_dims,
            b_dims,
            padded,
            acc: self.take_complex(len),
            terms: 0,
        }
    }

    fn take_complex(&self, len: usize) -> Vec<Complex64> {
        take_from(&self.complex_pool, len, Complex64::new(0.0, 0.0))
    }

    pub fn reset_counts(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.inverse.store(0, Ordering::Relaxed);
    }

    fn r2c(&self, n: usize) -> Arc<dyn RealToComplex<f64>> {
        let mut p = self.plans.lock().unwrap();
        let p = &mut *p;
        p.r2c
            .entry(n)
            .or_insert_with(|| p.real.plan_fft_forward(n))
            .clone()
    }

    fn c2r(&self, n: usize) -> Arc<dyn ComplexToReal<f64>> {
        let mut p = self.plans.lock().unwrap();
        let p = &mut *p;
        p.c2r
            .entry(n)
            .or_insert_with(|| p.real.plan_fft_inverse(n))
            .clone()
    }

    fn complex(&self, n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        let mut p = self.plans.lock().unwrap();
        let p = &mut *p;
        let (cache, planner) = if inverse {
            (&mut p.inv, &mut p.complex)
        } else {
            (&mut p.fwd, &mut p.complex)
        };
        cache
            .entry(n)
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    }

    /// Transforms `values` (dims `dims`, x-fastest) zero-padded to `padded`.
    pub fn forward(&self, dims: Dims, values: &[f64], padded: Dims) -> Result<Spectrum> {
        let planes = self.xy_passes(dims, values, padded)?;
        let block_len = (padded.nx() / 2 + 1) * padded.nz();
        let fft_z = self.complex(padded.nz(), false);
        let mut data = self.take_complex(block_len * padded.ny());
        data.par_chunks_mut(block_len).enumerate().for_each_init(
            || vec![Complex64::new(0.0, 0.0); fft_z.get_inplace_scratch_len()],
            |scratch, (y, block)| {
                z_block(&planes, dims.nz(), padded, y, block);
                fft_z.process_with_scratch(block, scratch);
            },
        );
        give_to(&self.complex_pool, planes);
        self.forward.fetch_add(1, Ordering::Relaxed);
        Ok(Spectrum {
            source: dims,
            padded,
            data,
        })
    }

    /// Transforms `values` like [`FftEngine::forward`] and adds
    /// `weight · conj(f) · G` to `acc` without keeping `G` around.
    pub fn forward_accumulate(
        &self,
        dims: Dims,
        values: &[f64],
        f: &Spectrum,
        weight: f64,
        acc: &mut Accumulator,
    ) -> Result<()> {
        acc.check(f.source, f.padded, dims, acc.padded)?;
        let padded = acc.padded;
        let planes = self.xy_passes(dims, values, padded)?;
        let block_len = (padded.nx() / 2 + 1) * padded.nz();
        let fft_z = self.complex(padded.nz(), false);
        let zero = Complex64::new(0.0, 0.0);
        let first = acc.terms == 0;
        acc.acc
            .par_chunks_mut(block_len)
            .zip(f.data.par_chunks(block_len))
            .enumerate()
            .for_each_init(
                || (vec![zero; block_len], vec![zero; fft_z.get_inplace_scratch_len()]),
                |(block, scratch), (y, (a, fc))| {
                    z_block(&planes, dims.nz(), padded, y, block);
                    fft_z.process_with_scratch(block, scratch);
                    accumulate(a, fc, block, weight, first);
                },
            );
        give_to(&self.complex_pool, planes);
        acc.terms += 1;
        self.forward.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    // x and y passes per z-slab into `[z][y][x]`; slabs beyond the grid are
    // zero and never stored.
    fn xy_passes(&self, dims: Dims, values: &[f64], padded: Dims) -> Result<Vec<Complex64>> {
        if values.len() != dims.len() {
            return Err(Error::DimsMismatch(format!(
                "{} values for dims {dims}",
                values.len()
            )));
        }
        if (0..3).any(|a| padded.0[a] < dims.0[a]) {
            return Err(Error::DimsMismatch(format!(
                "padded dims {padded} smaller than grid {dims}"
            )));
        }
        let [px, py, _] = padded.0;
        let [nx, ny, nz] = dims.0;
        let hx = px / 2 + 1;
        let zero = Complex64::new(0.0, 0.0);
        let slab = hx * py;
        let r2c = self.r2c(px);
        let fft_y = self.complex(py, false);
        let mut planes = self.take_complex(slab * nz);
        planes
            .par_chunks_mut(slab)
            .enumerate()
            .for_each_init(
                || SlabScratch::new(px, slab, r2c.get_scratch_len(), fft_y.get_inplace_scratch_len()),
                |sc, (z, out)| {
                    for y in 0..ny {
                        let start = dims.index(0, y, z);
                        sc.real[..nx].copy_from_slice(&values[start..start + nx]);
                        sc.real[nx..].fill(0.0);
                        r2c.process_with_scratch(
                            &mut sc.real,
                            &mut out[y * hx..(y + 1) * hx],
                            &mut sc.r2c,
                        )
                        .expect("r2c lengths match plan");
                    }
                    out[ny * hx..].fill(zero);
                    transpose_into(out, py, hx, &mut sc.cols);
                    fft_y.process_with_scratch(&mut sc.cols, &mut sc.fft);
                    transpose_into(&sc.cols, hx, py, out);
                },
            );
        Ok(planes)
    }

    /// Inverse transform of a spectrum back to the padded real grid (x-fastest).
    pub fn inverse(&self, spectrum: &Spectrum) -> Vec<f64> {
        let mut data = self.take_complex(spectrum.data.len());
        data.copy_from_slice(&spectrum.data);
        self.inverse_raw(spectrum.padded, data, spectrum.padded, [0; 3])
    }

    fn inverse_raw(
        &self,
        padded: Dims,
        mut data: Vec<Complex64>,
        window: Dims,
        origin: [usize; 3],
    ) -> Vec<f64> {
        let [px, py, pz] = padded.0;
        let hx = px / 2 + 1;
        let zero = Complex64::new(0.0, 0.0);
        let slab = hx * py;

        // z pass per y, transposing each block to `[y][z][x]`.
        let ifft_z = self.complex(pz, true);
        let mut rows = self.take_complex(slab * pz);
        rows.par_chunks_mut(hx * pz)
            .zip(data.par_chunks_mut(hx * pz))
            .for_each_init(
                || vec![zero; ifft_z.get_inplace_scratch_len()],
                |scratch, (dst, block)| {
                    ifft_z.process_with_scratch(block, scratch);
                    transpose_into(block, hx, pz, dst);
                },
            );
        give_to(&self.complex_pool, data);

        // y and x passes per output z-slab, writing only the requested window.
        // Window index `j` reads padded index `(j - origin) mod p` per axis.
        let wrap = |j: usize, o: usize, p: usize| (j as i64 - o as i64).rem_euclid(p as i64) as usize;
        let [ox, oy, oz] = origin;
        let [wx, wy, _] = window.0;
        let ifft_y = self.complex(py, true);
        let c2r = self.c2r(px);
        let scale = 1.0 / (px * py * pz) as f64;
        let mut out = vec![0.0; window.len()];
        out.par_chunks_mut(wx * wy).enumerate().for_each_init(
            || SlabScratch::new(px, slab, c2r.get_scratch_len(), ifft_y.get_inplace_scratch_len()),
            |sc, (jz, dst)| {
                let z = wrap(jz, oz, pz);
                for y in 0..py {
                    let src = &rows[(y * pz + z) * hx..(y * pz + z + 1) * hx];
                    for (x, &v) in src.iter().enumerate() {
                        sc.cols[x * py + y] = v;
                    }
                }
                ifft_y.process_with_scratch(&mut sc.cols, &mut sc.fft);
                for (jy, line) in dst.chunks_mut(wx).enumerate() {
                    let y = wrap(jy, oy, py);
                    for x in 0..hx {
                        sc.row[x] = sc.cols[x * py + y];
                    }
                    // Real output: DC and Nyquist bins carry only rounding noise in imag.
                    sc.row[0].im = 0.0;
                    if px % 2 == 0 {
                        sc.row[hx - 1].im = 0.0;
                    }
                    c2r.process_with_scratch(&mut sc.row, &mut sc.real, &mut sc.r2c)
                        .expect("c2r lengths match plan");
                    // Along x the window is two contiguous runs of the padded row.
                    let (head, tail) = line.split_at_mut(ox);
                    for (d, &v) in head.iter_mut().zip(&sc.real[px - ox..]) {
                        *d = v * scale;
                    }
                    for (d, &v) in tail.iter_mut().zip(&sc.real[..wx - ox]) {
                        *d = v * scale;
                    }
                }
            },
        );
        give_to(&self.complex_pool, rows);
        self.inverse.fetch_add(1, Ordering::Relaxed);
        out
    }

    /// Cross-correlation of the grids behind `f` and `g`, one inverse transform.
    pub fn correlate(&self, f: &Spectrum, g: &Spectrum) -> Result<CorrelationGrid> {
        self.accumulate_correlate(&[(f, g)], &[1.0])
    }

    /// `Σ_k w_k · conj(F_k) · G_k`, then a single inverse transform.
    pub fn accumulate_correlate(
        &self,
        pairs: &[(&Spectrum, &Spectrum)],
        weights: &[f64],
    ) -> Result<CorrelationGrid> {
        let Some((f0, g0)) = pairs.first() else {
            return Err(Error::invalid("accumulate_correlate needs at least one pair"));
        };
        if pairs.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} pairs but {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        let mut acc = self.accumulator(f0.source, g0.source, f0.padded);
        for ((f, g), &w) in pairs.iter().zip(weights) {
            acc.add(f, g, w)?;
        }
        Ok(self.finish(acc))
    }

    /// Inverse transform of an accumulated cross-power spectrum, cropped to the lattice.
    pub fn finish(&self, acc: Accumulator) -> CorrelationGrid {
        let Accumulator {
            a_dims,
            b_dims,
            padded,
            mut acc,
            terms,
        } = acc;
        if terms == 0 {
            acc.fill(Complex64::new(0.0, 0.0));
        }
        let dims = Dims([0, 1, 2].map(|a| a_dims.0[a] + b_dims.0[a] - 1));
        let origin = a_dims.0.map(|n| n - 1);
        let values = self.inverse_raw(padded, acc, dims, origin);
        CorrelationGrid {
            dims,
            origin,
            values,
        }
    }
}

/// Gathers the `[x][z]` block for row `y` out of the `[z][y][x]` planes.
fn z_block(planes: &[Complex64], nz: usize, padded: Dims, y: usize, block: &mut [Complex64]) {
    let [px, py, pz] = padded.0;
    let hx = px / 2 + 1;
    for z in 0..nz {
        let row = &planes[(z * py + y) * hx..(z * py + y + 1) * hx];
        for (x, &v) in row.iter().enumerate() {
            block[x * pz + z] = v;
        }
    }
    for x in 0..hx {
        block[x * pz + nz..(x + 1) * pz].fill(Complex64::new(0.0, 0.0));
    }
}

// `acc (+)= w · conj(f) · g`; the first term overwrites whatever `acc` held.
fn accumulate(acc: &mut [Complex64], f: &[Complex64], g: &[Complex64], w: f64, first: bool) {
    if first {
        for ((a, x), y) in acc.iter_mut().zip(f).zip(g) {
            *a = x.conj() * y * w;
        }
    } else {
        for ((a, x), y) in acc.iter_mut().zip(f).zip(g) {
            *a += x.conj() * y * w;
        }
    }
}

/// `dst[c * rows + r] = src[r * cols + c]` for a `rows x cols` matrix.
fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

struct SlabScratch {
    real: Vec<f64>,
    row: Vec<Complex64>,
    cols: Vec<Complex64>,
    r2c: Vec<Complex64>,
    fft: Vec<Complex64>,
}

impl SlabScratch {
    fn new(px: usize, slab: usize, real_scratch: usize, fft_scratch: usize) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        SlabScratch {
            real: vec![0.0; px],
            row: vec![zero; px / 2 + 1],
            cols: vec![zero; slab],
            r2c: vec![zero; real_scratch],
            fft: vec![zero; fft_scratch],
        }
    }
}
