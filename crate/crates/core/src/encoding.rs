//! Image series, k-space containers and the acquisition operator `E = A F S`.
//!
//! Layouts are first-index-fastest throughout. A voxel `(x, y, z)` has
//! linear index `x + nx * (y + ny * z)`; image series store echo-major
//! (`echo * n_voxels + voxel`), k-space stores
//! `(echo * n_coils + coil) * n_voxels + k`. K-space is kept in FFT order,
//! i.e. the DC sample sits at index 0 of every axis.

use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid(format!("grid dims must be positive, got {nx}x{ny}x{nz}")));
        }
        Ok(Self { nx, ny, nz })
    }

    /// Single-slice grid.
    pub fn new_2d(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_3d(&self) -> bool {
        self.nz > 1
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, v: usize) -> (usize, usize, usize) {
        (v % self.nx, (v / self.nx) % self.ny, v / (self.nx * self.ny))
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                expected: self.to_string(),
                found: other.to_string(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Complex image stack over spin-lock times.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSeries {
    grid: Grid,
    tsl_ms: Vec<f64>,
    data: Vec<Complex64>,
}

pub(crate) fn validate_tsl(tsl_ms: &[f64]) -> Result<()> {
    if tsl_ms.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 spin-lock times, got {}", tsl_ms.len())));
    }
    if tsl_ms.iter().any(|t| !t.is_finite()) || tsl_ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("spin-lock times must be finite and strictly increasing: {tsl_ms:?}")));
    }
    Ok(())
}

impl ImageSeries {
    pub fn new(grid: Grid, tsl_ms: Vec<f64>, data: Vec<Complex64>) -> Result<Self> {
        validate_tsl(&tsl_ms)?;
        let expected = grid.n_voxels() * tsl_ms.len();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "image series {grid} with {} echoes needs {expected} samples, got {}",
                tsl_ms.len(),
                data.len()
            )));
        }
        Ok(Self { grid, tsl_ms, data })
    }

    pub fn zeros(grid: Grid, tsl_ms: Vec<f64>) -> Result<Self> {
        let n = grid.n_voxels() * tsl_ms.len();
        Self::new(grid, tsl_ms, vec![Complex64::default(); n])
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn tsl_ms(&self) -> &[f64] {
        &self.tsl_ms
    }

    pub fn n_tsl(&self) -> usize {
        self.tsl_ms.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.n_voxels()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Same grid and echoes, new samples.
    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        Self::new(self.grid, self.tsl_ms.clone(), data)
    }

    pub fn echo(&self, e: usize) -> &[Complex64] {
        let n = self.n_voxels();
        &self.data[e * n..(e + 1) * n]
    }

    pub fn echo_mut(&mut self, e: usize) -> &mut [Complex64] {
        let n = self.n_voxels();
        &mut self.data[e * n..(e + 1) * n]
    }

    #[inline]
    pub fn at(&self, voxel: usize, echo: usize) -> Complex64 {
        self.data[echo * self.grid.n_voxels() + voxel]
    }

    /// Temporal signal of one voxel.
    pub fn signal(&self, voxel: usize) -> Vec<Complex64> {
        (0..self.n_tsl()).map(|e| self.at(voxel, e)).collect()
    }

    pub fn magnitude_echo(&self, e: usize) -> Vec<f64> {
        self.echo(e).iter().map(|z| z.norm()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub(crate) fn check_conformant(&self, other: &ImageSeries) -> Result<()> {
        self.grid.check_same(&other.grid)?;
        if self.n_tsl() != other.n_tsl() {
            return Err(Error::shape(format!("echo count {} vs {}", self.n_tsl(), other.n_tsl())));
        }
        Ok(())
    }
}

/// Receiver coil sensitivities. `Identity` is the single-coil case.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum CoilSensitivities {
    #[default]
    Identity,
    Maps {
        grid: Grid,
        n_coils: usize,
        /// `coil * n_voxels + voxel`.
        data: Vec<Complex64>,
    },
}

impl CoilSensitivities {
    pub fn from_maps(grid: Grid, n_coils: usize, data: Vec<Complex64>) -> Result<Self> {
        if n_coils == 0 {
            return Err(Error::invalid("coil maps need at least one coil"));
        }
        if data.len() != n_coils * grid.n_voxels() {
            return Err(Error::shape(format!(
                "{n_coils} coil maps on {grid} need {} samples, got {}",
                n_coils * grid.n_voxels(),
                data.len()
            )));
        }
        Ok(CoilSensitivities::Maps { grid, n_coils, data })
    }

    pub fn n_coils(&self) -> usize {
        match self {
            CoilSensitivities::Identity => 1,
            CoilSensitivities::Maps { n_coils, .. } => *n_coils,
        }
    }

    fn map(&self, coil: usize, n_voxels: usize) -> Option<&[Complex64]> {
        match self {
            CoilSensitivities::Identity => None,
            CoilSensitivities::Maps { data, .. } => Some(&data[coil * n_voxels..(coil + 1) * n_voxels]),
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        match self {
            CoilSensitivities::Identity => Ok(()),
            CoilSensitivities::Maps { grid: g, .. } => g.check_same(grid),
        }
    }

    /// Sum over coils of `|s_c|^2` per voxel.
    pub fn energy(&self, grid: &Grid) -> Vec<f64> {
        let n = grid.n_voxels();
        match self {
            CoilSensitivities::Identity => vec![1.0; n],
            CoilSensitivities::Maps { n_coils, data, .. } => {
                let mut e = vec![0.0; n];
                for c in 0..*n_coils {
                    for (acc, s) in e.iter_mut().zip(&data[c * n..(c + 1) * n]) {
                        *acc += s.norm_sqr();
                    }
                }
                e
            }
        }
    }
}

/// Per-echo binary sampling pattern on the k-space grid (FFT order).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    grid: Grid,
    n_tsl: usize,
    /// `echo * n_voxels + k`, values 0 or 1.
    data: Vec<u8>,
    r_requested: f64,
    seed: u64,
}

impl SamplingMask {
    pub fn new(grid: Grid, n_tsl: usize, data: Vec<u8>, r_requested: f64, seed: u64) -> Result<Self> {
        if n_tsl == 0 {
            return Err(Error::invalid("mask needs at least one echo"));
        }
        if data.len() != grid.n_voxels() * n_tsl {
            return Err(Error::shape(format!(
                "mask on {grid} with {n_tsl} echoes needs {} entries, got {}",
                grid.n_voxels() * n_tsl,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(Self { grid, n_tsl, data, r_requested, seed })
    }

    /// Every k-space location sampled for every echo.
    pub fn full(grid: Grid, n_tsl: usize) -> Self {
        Self {
            grid,
            n_tsl,
            data: vec![1; grid.n_voxels() * n_tsl],
            r_requested: 1.0,
            seed: 0,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn n_tsl(&self) -> usize {
        self.n_tsl
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn echo(&self, e: usize) -> &[u8] {
        let n = self.grid.n_voxels();
        &self.data[e * n..(e + 1) * n]
    }

    pub fn r_requested(&self) -> f64 {
        self.r_requested
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sampled_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Achieved acceleration: total points over sampled points.
    pub fn acceleration(&self) -> f64 {
        let s = self.sampled_count();
        if s == 0 {
            f64::INFINITY
        } else {
            self.data.len() as f64 / s as f64
        }
    }

    /// Zeroes unsampled entries of one echo's k-space.
    pub fn apply(&self, echo: usize, kspace: &mut [Complex64]) {
        for (v, &m) in kspace.iter_mut().zip(self.echo(echo)) {
            if m == 0 {
                *v = Complex64::default();
            }
        }
    }
}

/// Undersampled multi-coil measurements with their sampling mask.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    grid: Grid,
    tsl_ms: Vec<f64>,
    n_coils: usize,
    data: Vec<Complex64>,
    mask: SamplingMask,
}

impl KSpaceData {
    /// Wraps measurements, zeroing anything the mask does not sample.
    pub fn new(
        grid: Grid,
        tsl_ms: Vec<f64>,
        n_coils: usize,
        mut data: Vec<Complex64>,
        mask: SamplingMask,
    ) -> Result<Self> {
        validate_tsl(&tsl_ms)?;
        grid.check_same(&mask.grid)?;
        if mask.n_tsl != tsl_ms.len() {
            return Err(Error::shape(format!(
                "mask has {} echoes, data has {}",
                mask.n_tsl,
                tsl_ms.len()
            )));
        }
        let n = grid.n_voxels();
        if n_coils == 0 || data.len() != n * n_coils * tsl_ms.len() {
            return Err(Error::shape(format!(
                "k-space {grid} x {n_coils} coils x {} echoes needs {} samples, got {}",
                tsl_ms.len(),
                n * n_coils * tsl_ms.len(),
                data.len()
            )));
        }
        for e in 0..tsl_ms.len() {
            for c in 0..n_coils {
                let off = (e * n_coils + c) * n;
                mask.apply(e, &mut data[off..off + n]);
            }
        }
        Ok(Self { grid, tsl_ms, n_coils, data, mask })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn tsl_ms(&self) -> &[f64] {
        &self.tsl_ms
    }

    pub fn n_tsl(&self) -> usize {
        self.tsl_ms.len()
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Same acquisition, new samples (re-masked).
    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        Self::new(self.grid, self.tsl_ms.clone(), self.n_coils, data, self.mask.clone())
    }
}

/// Unitary n-dimensional DFT on a grid (`1/sqrt(N)` both ways).
pub struct UnitaryFft {
    grid: Grid,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
    scale: f64,
}

impl std::fmt::Debug for UnitaryFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryFft").field("grid", &self.grid).finish()
    }
}

impl UnitaryFft {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let dims = grid.dims();
        let forward = dims.map(|n| planner.plan_fft_forward(n));
        let inverse = dims.map(|n| planner.plan_fft_inverse(n));
        Self {
            grid,
            forward,
            inverse,
            scale: 1.0 / (grid.n_voxels() as f64).sqrt(),
        }
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.forward);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.inverse);
    }

    fn transform(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let Grid { nx, ny, nz } = self.grid;
        assert_eq!(buf.len(), self.grid.n_voxels());
        let scratch_len = plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0);
        let mut scratch = vec![Complex64::default(); scratch_len];
        if nx > 1 {
            plans[0].process_with_scratch(buf, &mut scratch);
        }
        if ny > 1 {
            let mut line = vec![Complex64::default(); ny];
            for z in 0..nz {
                for x in 0..nx {
                    let base = x + nx * ny * z;
                    for (y, l) in line.iter_mut().enumerate() {
                        *l = buf[base + nx * y];
                    }
                    plans[1].process_with_scratch(&mut line, &mut scratch);
                    for (y, l) in line.iter().enumerate() {
                        buf[base + nx * y] = *l;
                    }
                }
            }
        }
        if nz > 1 {
            let mut line = vec![Complex64::default(); nz];
            let plane = nx * ny;
            for p in 0..plane {
                for (z, l) in line.iter_mut().enumerate() {
                    *l = buf[p + plane * z];
                }
                plans[2].process_with_scratch(&mut line, &mut scratch);
                for (z, l) in line.iter().enumerate() {
                    buf[p + plane * z] = *l;
                }
            }
        }
        for v in buf.iter_mut() {
            *v *= self.scale;
        }
    }
}

/// The acquisition operator for one fixed coil set and mask.
#[derive(Debug)]
pub struct Encoder {
    grid: Grid,
    coils: CoilSensitivities,
    mask: SamplingMask,
    fft: UnitaryFft,
}

impl Encoder {
    pub fn new(coils: CoilSensitivities, mask: SamplingMask) -> Result<Self> {
        let grid = mask.grid();
        coils.check_grid(&grid)?;
        Ok(Self {
            grid,
            coils,
            mask,
            fft: UnitaryFft::new(grid),
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn coils(&self) -> &CoilSensitivities {
        &self.coils
    }

    fn check_image(&self, x: &ImageSeries) -> Result<()> {
        self.grid.check_same(&x.grid)?;
        if x.n_tsl() != self.mask.n_tsl() {
            return Err(Error::shape(format!(
                "image has {} echoes, mask has {}",
                x.n_tsl(),
                self.mask.n_tsl()
            )));
        }
        Ok(())
    }

    /// Coil-weight, transform and mask one echo into `out` (n_coils blocks).
    fn forward_echo(&self, echo: usize, image: &[Complex64], out: &mut [Complex64]) {
        let n = self.grid.n_voxels();
        for c in 0..self.coils.n_coils() {
            let dst = &mut out[c * n..(c + 1) * n];
            match self.coils.map(c, n) {
                None => dst.copy_from_slice(image),
                Some(s) => {
                    for ((d, x), s) in dst.iter_mut().zip(image).zip(s) {
                        *d = x * s;
                    }
                }
            }
            self.fft.forward(dst);
            self.mask.apply(echo, dst);
        }
    }

    /// Adjoint of [`Self::forward_echo`]; `work` is clobbered.
    fn adjoint_echo(&self, echo: usize, kspace: &[Complex64], work: &mut [Complex64], out: &mut [Complex64]) {
        let n = self.grid.n_voxels();
        out.iter_mut().for_each(|v| *v = Complex64::default());
        for c in 0..self.coils.n_coils() {
            work.copy_from_slice(&kspace[c * n..(c + 1) * n]);
            self.mask.apply(echo, work);
            self.fft.inverse(work);
            match self.coils.map(c, n) {
                None => {
                    for (o, w) in out.iter_mut().zip(work.iter()) {
                        *o += w;
                    }
                }
                Some(s) => {
                    for ((o, w), s) in out.iter_mut().zip(work.iter()).zip(s) {
                        *o += w * s.conj();
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &ImageSeries) -> Result<KSpaceData> {
        self.check_image(x)?;
        let n = self.grid.n_voxels();
        let nc = self.coils.n_coils();
        let mut data = vec![Complex64::default(); n * nc * x.n_tsl()];
        for e in 0..x.n_tsl() {
            self.forward_echo(e, x.echo(e), &mut data[e * nc * n..(e + 1) * nc * n]);
        }
        KSpaceData::new(self.grid, x.tsl_ms.clone(), nc, data, self.mask.clone())
    }

    pub fn adjoint(&self, y: &KSpaceData) -> Result<ImageSeries> {
        self.grid.check_same(&y.grid)?;
        if y.n_coils != self.coils.n_coils() || y.n_tsl() != self.mask.n_tsl() {
            return Err(Error::shape(format!(
                "k-space has {} coils x {} echoes, operator expects {} x {}",
                y.n_coils,
                y.n_tsl(),
                self.coils.n_coils(),
                self.mask.n_tsl()
            )));
        }
        let n = self.grid.n_voxels();
        let nc = self.coils.n_coils();
        let mut out = vec![Complex64::default(); n * y.n_tsl()];
        let mut work = vec![Complex64::default(); n];
        for e in 0..y.n_tsl() {
            self.adjoint_echo(e, &y.data[e * nc * n..(e + 1) * nc * n], &mut work, &mut out[e * n..(e + 1) * n]);
        }
        ImageSeries::new(self.grid, y.tsl_ms.clone(), out)
    }

    /// `E^H E x` on a raw echo-major buffer.
    pub fn normal(&self, x: &[Complex64], out: &mut [Complex64]) {
        let n = self.grid.n_voxels();
        let nc = self.coils.n_coils();
        let mut k = vec![Complex64::default(); n * nc];
        let mut work = vec![Complex64::default(); n];
        for e in 0..self.mask.n_tsl() {
            self.forward_echo(e, &x[e * n..(e + 1) * n], &mut k);
            self.adjoint_echo(e, &k, &mut work, &mut out[e * n..(e + 1) * n]);
        }
    }
}

/// `E x` for identity-free callers.
pub fn forward(x: &ImageSeries, coils: &CoilSensitivities, mask: &SamplingMask) -> Result<KSpaceData> {
    Encoder::new(coils.clone(), mask.clone())?.forward(x)
}

/// `E^H y`, the zero-filled reconstruction.
pub fn adjoint(y: &KSpaceData, coils: &CoilSensitivities) -> Result<ImageSeries> {
    Encoder::new(coils.clone(), y.mask.clone())?.adjoint(y)
}

/// Containers that accept additive complex Gaussian noise.
pub trait NoiseTarget: Sized {
    /// Samples that carry signal; only these receive noise.
    fn noisy_samples(&mut self) -> Vec<&mut Complex64>;
}

impl NoiseTarget for ImageSeries {
    fn noisy_samples(&mut self) -> Vec<&mut Complex64> {
        self.data.iter_mut().collect()
    }
}

impl NoiseTarget for KSpaceData {
    fn noisy_samples(&mut self) -> Vec<&mut Complex64> {
        let n = self.grid.n_voxels();
        let nc = self.n_coils;
        let mask = &self.mask;
        self.data
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| {
                let echo = i / (n * nc);
                mask.echo(echo)[i % n] == 1
            })
            .map(|(_, v)| v)
            .collect()
    }
}

/// Adds i.i.d. complex Gaussian noise with total standard deviation
/// `mean(|signal|) / snr` (each component gets `sigma / sqrt(2)`).
///
/// For k-space only sampled locations are counted and perturbed.
pub fn add_noise<T: NoiseTarget + Clone>(signal: &T, snr: f64, seed: u64) -> Result<T> {
    if snr.is_nan() || snr <= 0.0 {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    let mut out = signal.clone();
    let mut samples = out.noisy_samples();
    if samples.is_empty() {
        return Ok(out);
    }
    let mean = samples.iter().map(|z| z.norm()).sum::<f64>() / samples.len() as f64;
    let sigma = mean / snr;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma / std::f64::consts::SQRT_2)
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for z in samples.iter_mut() {
        let re = normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        **z += Complex64::new(re, im);
    }
    drop(samples);
    Ok(out)
}
