//! Retrospective undersampling patterns.
//!
//! Both generators work in centered frequency coordinates and convert to
//! FFT order when writing the mask. Every echo gets its own pattern: echo
//! `e` draws from stream `e` of a ChaCha generator seeded with `seed`.

use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{Grid, SamplingMask};
use crate::error::{Error, Result};

/// Exponent of the variable-density law `(1 - |ky| / ky_max)^p`.
pub const DENSITY_POWER: i32 = 4;

/// Default fully sampled center: one sixteenth of the phase-encode lines.
pub fn default_center_lines(ny: usize) -> usize {
    ny / 16
}

fn echo_rng(seed: u64, echo: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(echo as u64);
    rng
}

/// Maps a centered coordinate (DC at `n / 2`) to its FFT-order index.
#[inline]
pub fn centered_to_fft(c: usize, n: usize) -> usize {
    (c + n - n / 2) % n
}

fn check_acceleration(r: f64) -> Result<()> {
    if !(r.is_finite() && r >= 1.0) {
        return Err(Error::invalid(format!("acceleration must be finite and >= 1, got {r}")));
    }
    Ok(())
}

/// Pseudo-random ky-line pattern with a fully sampled center block.
///
/// Each echo keeps `round(ny / r)` lines: the `center_lines` around DC plus
/// lines drawn without replacement with probability proportional to
/// `(1 - |ky| / ky_max)^4`. Readout (x) and the third axis are fully sampled.
pub fn make_mask_1d(grid: Grid, n_tsl: usize, r: f64, center_lines: usize, seed: u64) -> Result<SamplingMask> {
    check_acceleration(r)?;
    let ny = grid.ny;
    let target = ((ny as f64 / r).round() as usize).clamp(1, ny);
    if center_lines > target {
        return Err(Error::Infeasible(format!(
            "{center_lines} center lines exceed the budget of {target} lines for R = {r}"
        )));
    }
    let center_start = ny / 2 - center_lines / 2;
    let is_center = |c: usize| c >= center_start && c < center_start + center_lines;
    let ky_max = (ny / 2) as f64 + 1.0;
    let outer: Vec<usize> = (0..ny).filter(|&c| !is_center(c)).collect();
    let weights: Vec<f64> = outer
        .iter()
        .map(|&c| {
            let f = c as f64 - (ny / 2) as f64;
            (1.0 - f.abs() / ky_max).powi(DENSITY_POWER)
        })
        .collect();

    let n = grid.n_voxels();
    let mut data = vec![0u8; n * n_tsl];
    for e in 0..n_tsl {
        let mut lines: Vec<usize> = (center_start..center_start + center_lines).collect();
        let extra = target - center_lines;
        if extra > 0 {
            let mut rng = echo_rng(seed, e);
            let picks = sample_weighted(&mut rng, outer.len(), |i| weights[i], extra)
                .map_err(|err| Error::Infeasible(format!("weighted line selection: {err}")))?;
            lines.extend(picks.iter().map(|i| outer[i]));
        }
        let echo = &mut data[e * n..(e + 1) * n];
        for c in lines {
            let y = centered_to_fft(c, ny);
            for z in 0..grid.nz {
                for x in 0..grid.nx {
                    echo[grid.index(x, y, z)] = 1;
                }
            }
        }
    }
    SamplingMask::new(grid, n_tsl, data, r, seed)
}

/// Exclusion radius that grows linearly with normalized distance from the
/// k-space center: `base * (1 + growth * rho)`, `rho` in `[0, 1]` at the
/// corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariableRadius {
    pub base: f64,
    pub growth: f64,
    center: (f64, f64),
    half: (f64, f64),
}

/// Default outer-to-center radius ratio minus one.
pub const POISSON_RADIUS_GROWTH: f64 = 3.0;

impl VariableRadius {
    pub fn new(ny: usize, nz: usize, base: f64, growth: f64) -> Self {
        Self {
            base,
            growth,
            center: ((ny / 2) as f64, (nz / 2) as f64),
            half: ((ny as f64 / 2.0).max(1.0), (nz as f64 / 2.0).max(1.0)),
        }
    }

    pub fn at(&self, y: f64, z: f64) -> f64 {
        let u = (y - self.center.0) / self.half.0;
        let v = (z - self.center.1) / self.half.1;
        let rho = ((u * u + v * v) / 2.0).sqrt().min(1.0);
        self.base * (1.0 + self.growth * rho)
    }
}

/// One echo's Poisson-disk pattern in centered `(ky, kz)` coordinates.
#[derive(Clone, Debug)]
pub struct PoissonPattern {
    pub ny: usize,
    pub nz: usize,
    /// `y + ny * z`, centered coordinates.
    pub sampled: Vec<bool>,
    pub in_center: Vec<bool>,
    pub radius: VariableRadius,
}

fn center_disk(ny: usize, nz: usize, radius: f64) -> Vec<bool> {
    let (cy, cz) = ((ny / 2) as f64, (nz / 2) as f64);
    let mut out = vec![false; ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            let d2 = (y as f64 - cy).powi(2) + (z as f64 - cz).powi(2);
            out[y + ny * z] = d2 <= radius * radius;
        }
    }
    out
}

/// Bridson-style dart throwing on the integer grid. A candidate `q` is
/// accepted when no earlier sample lies closer than `radius(q)`.
fn dart_throw(ny: usize, nz: usize, radius: &VariableRadius, excluded: &[bool], rng: &mut ChaCha8Rng) -> Vec<usize> {
    const ATTEMPTS: usize = 30;
    let mut occupied = vec![false; ny * nz];
    let mut samples = Vec::new();
    let mut active = Vec::new();

    let free: Vec<usize> = (0..ny * nz).filter(|&i| !excluded[i]).collect();
    if free.is_empty() {
        return samples;
    }

    let fits = |occupied: &[bool], y: usize, z: usize| -> bool {
        let r = radius.at(y as f64, z as f64);
        let reach = r.ceil() as isize;
        let r2 = r * r;
        for dz in -reach..=reach {
            let zz = z as isize + dz;
            if zz < 0 || zz >= nz as isize {
                continue;
            }
            for dy in -reach..=reach {
                let yy = y as isize + dy;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                if ((dy * dy + dz * dz) as f64) < r2 && occupied[yy as usize + ny * zz as usize] {
                    return false;
                }
            }
        }
        true
    };

    let start = free[rng.random_range(0..free.len())];
    occupied[start] = true;
    samples.push(start);
    active.push(start);

    while !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let p = active[slot];
        let (py, pz) = ((p % ny) as f64, (p / ny) as f64);
        let r = radius.at(py, pz);
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let dist = r * (1.0 + rng.random::<f64>());
            let qy = (py + dist * angle.cos()).round();
            let qz = (pz + dist * angle.sin()).round();
            if qy < 0.0 || qz < 0.0 || qy >= ny as f64 || qz >= nz as f64 {
                continue;
            }
            let (qy, qz) = (qy as usize, qz as usize);
            let q = qy + ny * qz;
            if excluded[q] || occupied[q] || !fits(&occupied, qy, qz) {
                continue;
            }
            occupied[q] = true;
            samples.push(q);
            active.push(q);
            placed = true;
            break;
        }
        if !placed {
            active.swap_remove(slot);
        }
    }
    samples
}

/// Poisson-disk pattern on an `ny x nz` phase-encode plane holding
/// `round(ny * nz / r)` points including the fully sampled center disk.
pub fn poisson_disk_pattern(
    ny: usize,
    nz: usize,
    r: f64,
    center_radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PoissonPattern> {
    check_acceleration(r)?;
    let total = ny * nz;
    let target = ((total as f64 / r).round() as usize).clamp(1, total);
    let in_center = center_disk(ny, nz, center_radius.max(0.0));
    let n_center = in_center.iter().filter(|&&c| c).count();
    if n_center > target {
        return Err(Error::Infeasible(format!(
            "center disk holds {n_center} points, more than the {target} allowed at R = {r}"
        )));
    }
    let needed = target - n_center;
    let mut sampled = in_center.clone();
    let free = total - n_center;

    if needed >= free {
        sampled.iter_mut().for_each(|s| *s = true);
        return Ok(PoissonPattern {
            ny,
            nz,
            sampled,
            in_center,
            radius: VariableRadius::new(ny, nz, 0.0, POISSON_RADIUS_GROWTH),
        });
    }

    // Bisect the base radius for the sparsest pattern that still holds at
    // least `needed` points, then thin at random.
    let mut lo = 0.5_f64;
    let mut hi = (ny.max(nz) as f64).max(1.0);
    let mut best: Option<(VariableRadius, Vec<usize>)> = None;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let radius = VariableRadius::new(ny, nz, mid, POISSON_RADIUS_GROWTH);
        let mut trial_rng = rng.clone();
        let pts = dart_throw(ny, nz, &radius, &in_center, &mut trial_rng);
        if pts.len() >= needed {
            let slack = pts.len() - needed;
            let keep = best.as_ref().map_or(true, |(_, b)| slack <= b.len() - needed);
            if keep {
                best = Some((radius, pts));
            }
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-3 {
            break;
        }
    }
    let (radius, mut pts) = best.ok_or_else(|| {
        Error::Infeasible(format!("could not place {needed} Poisson-disk samples on {ny}x{nz}"))
    })?;
    // Advance the caller's stream past the trials so echoes stay independent.
    let _ = rng.random::<u64>();
    while pts.len() > needed {
        let i = rng.random_range(0..pts.len());
        pts.swap_remove(i);
    }
    for p in pts {
        sampled[p] = true;
    }
    Ok(PoissonPattern { ny, nz, sampled, in_center, radius })
}

/// Variable-density Poisson-disk pattern over the `(ky, kz)` plane,
/// replicated along the readout axis.
pub fn make_mask_poisson(grid: Grid, n_tsl: usize, r: f64, center_radius: f64, seed: u64) -> Result<SamplingMask> {
    if grid.ny < 2 || grid.nz < 2 {
        return Err(Error::invalid(format!(
            "Poisson-disk sampling needs a 2D phase-encode plane, grid is {grid}"
        )));
    }
    let n = grid.n_voxels();
    let mut data = vec![0u8; n * n_tsl];
    for e in 0..n_tsl {
        let mut rng = echo_rng(seed, e);
        let pattern = poisson_disk_pattern(grid.ny, grid.nz, r, center_radius, &mut rng)?;
        let echo = &mut data[e * n..(e + 1) * n];
        for cz in 0..grid.nz {
            for cy in 0..grid.ny {
                if pattern.sampled[cy + grid.ny * cz] {
                    let (y, z) = (centered_to_fft(cy, grid.ny), centered_to_fft(cz, grid.nz));
                    for x in 0..grid.nx {
                        echo[grid.index(x, y, z)] = 1;
                    }
                }
            }
        }
    }
    SamplingMask::new(grid, n_tsl, data, r, seed)
}

/// Serializable description of a mask request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Pseudo-random ky lines; `center_lines` defaults to `ny / 16`.
    Lines { r: f64, center_lines: Option<usize>, seed: u64 },
    /// Poisson disk over (ky, kz); needs a 3D grid.
    Poisson { r: f64, center_radius: f64, seed: u64 },
}

impl MaskSpec {
    pub fn lines(r: f64, seed: u64) -> Self {
        MaskSpec::Lines { r, center_lines: None, seed }
    }

    pub fn acceleration(&self) -> f64 {
        match *self {
            MaskSpec::Lines { r, .. } | MaskSpec::Poisson { r, .. } => r,
        }
    }

    pub fn build(&self, grid: Grid, n_tsl: usize) -> Result<SamplingMask> {
        match *self {
            MaskSpec::Lines { r, center_lines, seed } => {
                make_mask_1d(grid, n_tsl, r, center_lines.unwrap_or_else(|| default_center_lines(grid.ny)), seed)
            }
            MaskSpec::Poisson { r, center_radius, seed } => make_mask_poisson(grid, n_tsl, r, center_radius, seed),
        }
    }
}
