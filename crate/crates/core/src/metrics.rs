//! Image-quality metrics on magnitude images.
//!
//! Windowed metrics (SSIM, HFEN) work on 2D planes; 3D grids are scored
//! plane by plane along z.

use serde::{Deserialize, Serialize};

use crate::encoding::{Grid, ImageSeries};
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 300.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const LOG_SIZE: usize = 15;
const LOG_SIGMA: f64 = 1.5;

fn check_pair(x: &[f64], r: &[f64]) -> Result<()> {
    if x.len() != r.len() {
        return Err(Error::shape(format!("image has {} values, reference has {}", x.len(), r.len())));
    }
    Ok(())
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|a| a * a).sum::<f64>().sqrt()
}

fn nonzero_reference(norm: f64) -> Result<()> {
    if norm == 0.0 {
        return Err(Error::invalid("reference image is all zero"));
    }
    Ok(())
}

/// `|x - ref| / |ref|`.
pub fn nrmse(x: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(x, reference)?;
    let denom = l2(reference.iter().copied());
    nonzero_reference(denom)?;
    Ok(l2(x.iter().zip(reference).map(|(a, b)| a - b)) / denom)
}

/// `20 log10(max|ref| / RMSE)`, capped for identical inputs.
pub fn psnr(x: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(x, reference)?;
    let peak = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    nonzero_reference(peak)?;
    let rmse = l2(x.iter().zip(reference).map(|(a, b)| a - b)) / (x.len() as f64).sqrt();
    if rmse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / rmse).log10()).min(PSNR_CAP_DB))
}

fn planes(grid: &Grid) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    let n = grid.nx * grid.ny;
    (0..grid.nz).map(move |z| z * n..(z + 1) * n)
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `nx x ny` plane.
fn filter_valid(img: &[f64], nx: usize, ny: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let (ox, oy) = (nx + 1 - k, ny + 1 - k);
    let mut rows = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            rows[x + ox * y] = (0..k).map(|i| w[i] * img[x + i + nx * y]).sum();
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            out[x + ox * y] = (0..k).map(|i| w[i] * rows[x + ox * (y + i)]).sum();
        }
    }
    (out, ox, oy)
}

/// Mean SSIM over all 11x11 Gaussian windows that fit inside each plane.
pub fn ssim(x: &[f64], reference: &[f64], grid: Grid) -> Result<f64> {
    check_pair(x, reference)?;
    if x.len() != grid.n_voxels() {
        return Err(Error::shape(format!("image has {} values, grid {grid} has {}", x.len(), grid.n_voxels())));
    }
    if grid.nx < SSIM_WINDOW || grid.ny < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {grid}")));
    }
    let peak = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    nonzero_reference(peak)?;
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let w = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let (mut total, mut count) = (0.0, 0usize);
    for range in planes(&grid) {
        let a = &x[range.clone()];
        let b = &reference[range];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
        let (mu_a, _, _) = filter_valid(a, grid.nx, grid.ny, &w);
        let (mu_b, _, _) = filter_valid(b, grid.nx, grid.ny, &w);
        let (aa, _, _) = filter_valid(&prod(&|p, _| p * p), grid.nx, grid.ny, &w);
        let (bb, _, _) = filter_valid(&prod(&|_, q| q * q), grid.nx, grid.ny, &w);
        let (ab, _, _) = filter_valid(&prod(&|p, q| p * q), grid.nx, grid.ny, &w);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Zero-sum 15x15 Laplacian-of-Gaussian kernel, row-major.
pub(crate) fn log_kernel() -> Vec<f64> {
    let c = (LOG_SIZE as f64 - 1.0) / 2.0;
    let s2 = LOG_SIGMA * LOG_SIGMA;
    let mut g = Vec::with_capacity(LOG_SIZE * LOG_SIZE);
    for y in 0..LOG_SIZE {
        for x in 0..LOG_SIZE {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            g.push((r2, (-r2 / (2.0 * s2)).exp()));
        }
    }
    let gs: f64 = g.iter().map(|p| p.1).sum();
    let mut h: Vec<f64> = g.iter().map(|&(r2, e)| e / gs * (r2 - 2.0 * s2) / (s2 * s2)).collect();
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    h.iter_mut().for_each(|v| *v -= mean);
    h
}

/// LoG filtering of one plane with edge replication, output the same size.
fn log_filter(img: &[f64], nx: usize, ny: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (LOG_SIZE / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for ky in 0..LOG_SIZE {
                let sy = clamp(y as isize + ky as isize - half, ny);
                for kx in 0..LOG_SIZE {
                    let sx = clamp(x as isize + kx as isize - half, nx);
                    acc += kernel[kx + LOG_SIZE * ky] * img[sx + nx * sy];
                }
            }
            out[x + nx * y] = acc;
        }
    }
    out
}

/// `|LoG(x) - LoG(ref)| / |LoG(ref)|`.
pub fn hfen(x: &[f64], reference: &[f64], grid: Grid) -> Result<f64> {
    check_pair(x, reference)?;
    if x.len() != grid.n_voxels() {
        return Err(Error::shape(format!("image has {} values, grid {grid} has {}", x.len(), grid.n_voxels())));
    }
    let kernel = log_kernel();
    let (mut num, mut den) = (0.0, 0.0);
    for range in planes(&grid) {
        let la = log_filter(&x[range.clone()], grid.nx, grid.ny, &kernel);
        let lb = log_filter(&reference[range], grid.nx, grid.ny, &kernel);
        num += la.iter().zip(&lb).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        den += lb.iter().map(|b| b * b).sum::<f64>();
    }
    // LoG of a flat reference is zero up to rounding.
    let k1: f64 = kernel.iter().map(|k| k.abs()).sum();
    let flat = 1e-24 * k1 * k1 * reference.iter().map(|v| v * v).sum::<f64>();
    if den <= flat {
        return Err(Error::invalid("reference image has no high-frequency content"));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub nrmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub hfen: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub reference: String,
    /// Whole-series values; SSIM is the mean over echoes.
    pub aggregate: MetricValues,
    pub per_tsl: Vec<MetricValues>,
}

impl MetricReport {
    pub fn compare(x: &ImageSeries, reference: &ImageSeries, reference_id: impl Into<String>) -> Result<Self> {
        x.check_conformant(reference)?;
        let grid = x.grid();
        let mag = |s: &ImageSeries| -> Vec<f64> { s.data().iter().map(|v| v.norm()).collect() };
        let (all_x, all_r) = (mag(x), mag(reference));
        let n = grid.n_voxels();
        let mut per_tsl = Vec::with_capacity(x.n_tsl());
        for e in 0..x.n_tsl() {
            let (a, b) = (&all_x[e * n..(e + 1) * n], &all_r[e * n..(e + 1) * n]);
            per_tsl.push(MetricValues {
                nrmse: nrmse(a, b)?,
                psnr: psnr(a, b)?,
                ssim: ssim(a, b, grid)?,
                hfen: hfen(a, b, grid)?,
            });
        }
        let stacked = Grid::new(grid.nx, grid.ny, grid.nz * x.n_tsl())?;
        let aggregate = MetricValues {
            nrmse: nrmse(&all_x, &all_r)?,
            psnr: psnr(&all_x, &all_r)?,
            ssim: per_tsl.iter().map(|m| m.ssim).sum::<f64>() / per_tsl.len() as f64,
            hfen: hfen(&all_x, &all_r, stacked)?,
        };
        Ok(Self { reference: reference_id.into(), aggregate, per_tsl })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tsl_index,nrmse,psnr,ssim,hfen\n");
        let row = |label: &str, m: &MetricValues| format!("{label},{},{},{},{}\n", m.nrmse, m.psnr, m.ssim, m.hfen);
        for (e, m) in self.per_tsl.iter().enumerate() {
            s += &row(&e.to_string(), m);
        }
        s += &row("all", &self.aggregate);
        s
    }
}
