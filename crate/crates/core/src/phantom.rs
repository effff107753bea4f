//! Tube phantom, noise sweeps and the per-pixel versus block Hankel rank
//! experiment.
//!
//! The phantom is five disks on a ring, extruded along z for 3D grids.
//! Background voxels carry no signal.

use faer::Side;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{CoilSensitivities, Encoder, Grid, ImageSeries, KSpaceData};
use crate::error::{Error, Result};
use crate::fitting::{bi_model, mono_model, BiExpParams, MonoExpParams};
use crate::parametric::{build_hankel, HankelSpec};
use crate::sampling::MaskSpec;
use crate::tensor::ComplexMatrix;
use crate::Complex64;

pub const DEFAULT_TSL_MS: [f64; 5] = [1.0, 20.0, 40.0, 60.0, 80.0];
pub const MONO_T1RHO_MS: [f64; 5] = [77.0, 78.0, 79.0, 82.0, 89.0];
pub const BI_SHORT_T1RHO_MS: [f64; 5] = [18.0, 19.0, 20.0, 21.0, 22.0];
pub const BI_ALPHA: f64 = 0.91;
pub const TUBE_RADIUS: f64 = 20.0;
pub const RING_RADIUS: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum TubeModel {
    Mono { t1rho: f64 },
    /// `alpha` weights the long component.
    Bi { t1rho_long: f64, t1rho_short: f64, alpha: f64 },
}

impl TubeModel {
    fn signal(&self, m0: f64, tsl_ms: &[f64]) -> Vec<f64> {
        match *self {
            TubeModel::Mono { t1rho } => mono_model(MonoExpParams { m0, t1rho }, tsl_ms),
            TubeModel::Bi { t1rho_long, t1rho_short, alpha } => {
                bi_model(BiExpParams { m0, t1rho_long, t1rho_short, alpha }, tsl_ms)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TubeModel::Mono { t1rho } if !(t1rho > 0.0 && t1rho.is_finite()) => {
                Err(Error::invalid(format!("tube T1rho must be positive, got {t1rho}")))
            }
            TubeModel::Mono { .. } => Ok(()),
            TubeModel::Bi { t1rho_long, t1rho_short, alpha } => {
                BiExpParams { m0: 1.0, t1rho_long, t1rho_short, alpha }.validate()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tube {
    /// In-plane center (x, y) in voxel units.
    pub center: [f64; 2],
    pub radius: f64,
    pub m0: f64,
    #[serde(flatten)]
    pub model: TubeModel,
}

impl Tube {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 - self.center[0], y as f64 - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: Grid,
    pub tubes: Vec<Tube>,
    pub tsl_ms: Vec<f64>,
}

fn ring_tubes(grid: Grid, models: impl Iterator<Item = TubeModel>) -> Vec<Tube> {
    let (cx, cy) = (grid.nx as f64 / 2.0, grid.ny as f64 / 2.0);
    let models: Vec<TubeModel> = models.collect();
    let n = models.len() as f64;
    models
        .into_iter()
        .enumerate()
        .map(|(i, model)| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n;
            Tube {
                center: [cx + RING_RADIUS * a.cos(), cy + RING_RADIUS * a.sin()],
                radius: TUBE_RADIUS,
                m0: 1.0,
                model,
            }
        })
        .collect()
}

impl PhantomSpec {
    pub fn default_grid() -> Grid {
        Grid::new_2d(192, 192).expect("static grid")
    }

    pub fn mono() -> Self {
        let grid = Self::default_grid();
        Self {
            grid,
            tubes: ring_tubes(grid, MONO_T1RHO_MS.iter().map(|&t1rho| TubeModel::Mono { t1rho })),
            tsl_ms: DEFAULT_TSL_MS.to_vec(),
        }
    }

    pub fn bi() -> Self {
        let grid = Self::default_grid();
        let models = MONO_T1RHO_MS.iter().zip(BI_SHORT_T1RHO_MS).map(|(&t1rho_long, t1rho_short)| TubeModel::Bi {
            t1rho_long,
            t1rho_short,
            alpha: BI_ALPHA,
        });
        Self { grid, tubes: ring_tubes(grid, models), tsl_ms: DEFAULT_TSL_MS.to_vec() }
    }

    /// Same tube layout on another grid; tubes shrink with the in-plane size.
    pub fn rescaled(&self, grid: Grid) -> Self {
        let s = (grid.nx.min(grid.ny) as f64) / (self.grid.nx.min(self.grid.ny) as f64);
        let (ox, oy) = (self.grid.nx as f64 / 2.0, self.grid.ny as f64 / 2.0);
        let (cx, cy) = (grid.nx as f64 / 2.0, grid.ny as f64 / 2.0);
        let tubes = self
            .tubes
            .iter()
            .map(|t| Tube {
                center: [cx + (t.center[0] - ox) * s, cy + (t.center[1] - oy) * s],
                radius: t.radius * s,
                ..*t
            })
            .collect();
        Self { grid, tubes, tsl_ms: self.tsl_ms.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.grid.nx, self.grid.ny, self.grid.nz)?;
        crate::encoding::validate_tsl(&self.tsl_ms)?;
        for (i, t) in self.tubes.iter().enumerate() {
            t.model.validate()?;
            let [x, y] = t.center;
            if !(t.radius > 0.0 && t.m0 >= 0.0 && t.m0.is_finite()) {
                return Err(Error::invalid(format!("tube {i}: radius and M0 must be positive")));
            }
            if x - t.radius < 0.0
                || y - t.radius < 0.0
                || x + t.radius > (self.grid.nx - 1) as f64
                || y + t.radius > (self.grid.ny - 1) as f64
            {
                return Err(Error::invalid(format!("tube {i} at ({x}, {y}) r={} leaves the grid", t.radius)));
            }
        }
        for i in 0..self.tubes.len() {
            for j in i + 1..self.tubes.len() {
                let (a, b) = (&self.tubes[i], &self.tubes[j]);
                let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
                if d <= a.radius + b.radius {
                    return Err(Error::invalid(format!("tubes {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Per-voxel ground truth. For bi-exponential tubes `t1rho` holds the long
/// component.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub grid: Grid,
    pub t1rho: Vec<f64>,
    pub t1rho_short: Option<Vec<f64>>,
    pub m0: Vec<f64>,
    pub tube: Vec<Option<u8>>,
}

impl GroundTruth {
    pub fn tube_voxels(&self, id: usize) -> Vec<usize> {
        (0..self.tube.len()).filter(|&v| self.tube[v] == Some(id as u8)).collect()
    }

    pub fn support(&self) -> Vec<bool> {
        self.tube.iter().map(Option::is_some).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub series: ImageSeries,
    pub truth: GroundTruth,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    if spec.tubes.len() > u8::MAX as usize {
        return Err(Error::invalid("at most 255 tubes"));
    }
    let grid = spec.grid;
    let n = grid.n_voxels();
    let mut series = ImageSeries::zeros(grid, spec.tsl_ms.clone())?;
    let mut t1rho = vec![0.0; n];
    let mut short = vec![0.0; n];
    let mut m0 = vec![0.0; n];
    let mut tube = vec![None; n];
    let signals: Vec<Vec<f64>> = spec.tubes.iter().map(|t| t.model.signal(t.m0, &spec.tsl_ms)).collect();
    for v in 0..n {
        let (x, y, _) = grid.coords(v);
        let Some(id) = spec.tubes.iter().position(|t| t.contains(x, y)) else {
            continue;
        };
        let t = &spec.tubes[id];
        for (e, s) in signals[id].iter().enumerate() {
            series.echo_mut(e)[v] = Complex64::new(*s, 0.0);
        }
        tube[v] = Some(id as u8);
        m0[v] = t.m0;
        match t.model {
            TubeModel::Mono { t1rho: t1 } => t1rho[v] = t1,
            TubeModel::Bi { t1rho_long, t1rho_short, .. } => {
                t1rho[v] = t1rho_long;
                short[v] = t1rho_short;
            }
        }
    }
    let any_bi = spec.tubes.iter().any(|t| matches!(t.model, TubeModel::Bi { .. }));
    Ok(Phantom {
        series,
        truth: GroundTruth { grid, t1rho, t1rho_short: any_bi.then_some(short), m0, tube },
    })
}

/// Single-coil k-space of the phantom under the requested mask.
pub fn undersample_experiment(phantom: &ImageSeries, mask: &MaskSpec) -> Result<KSpaceData> {
    let mask = mask.build(phantom.grid(), phantom.n_tsl())?;
    Encoder::new(CoilSensitivities::Identity, mask)?.forward(phantom)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("rank ratio must lie in (0, 1), got {ratio}")));
    }
    Ok(())
}

fn count_above(sv: &[f64], ratio: f64) -> usize {
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s >= ratio * max).count()
}

/// Number of singular values at or above `ratio` times the largest one.
pub fn estimate_rank(m: &ComplexMatrix, ratio: f64) -> Result<usize> {
    check_ratio(ratio)?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0);
    }
    let sv = m
        .singular_values()
        .map_err(|e| Error::Numerical(format!("singular value decomposition failed: {e:?}")))?;
    Ok(count_above(&sv, ratio))
}

/// Rank from the eigenvalues of a small Gram matrix `G Gᴴ`.
fn gram_rank(gram: &ComplexMatrix, ratio: f64) -> Result<usize> {
    let ev = gram
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerical(format!("hermitian eigendecomposition failed: {e:?}")))?;
    let sv: Vec<f64> = ev.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(count_above(&sv, ratio))
}

fn add_outer(gram: &mut ComplexMatrix, h: &ComplexMatrix) {
    for i in 0..h.nrows() {
        for j in 0..h.nrows() {
            gram[(i, j)] += (0..h.ncols()).map(|q| h[(i, q)] * h[(j, q)].conj()).sum::<Complex64>();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeRanks {
    pub mean_pixel_rank: f64,
    pub block_rank: usize,
}

/// Per-pixel and block Hankel ranks of every tube in `x`.
pub fn tube_ranks(x: &ImageSeries, truth: &GroundTruth, ratio: f64) -> Result<Vec<TubeRanks>> {
    check_ratio(ratio)?;
    let spec = HankelSpec::for_echoes(x.n_tsl());
    let rows = spec.rows(x.n_tsl());
    let n_tubes = truth.tube.iter().flatten().map(|&t| t as usize + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(n_tubes);
    for id in 0..n_tubes {
        let voxels = truth.tube_voxels(id);
        let mut block = ComplexMatrix::zeros(rows, rows);
        let mut pixel_sum = 0usize;
        for &v in &voxels {
            let h = build_hankel(&x.signal(v), spec)?;
            let mut g = ComplexMatrix::zeros(rows, rows);
            add_outer(&mut g, &h);
            pixel_sum += gram_rank(&g, ratio)?;
            block += &g;
        }
        let mean_pixel_rank = if voxels.is_empty() { 0.0 } else { pixel_sum as f64 / voxels.len() as f64 };
        out.push(TubeRanks { mean_pixel_rank, block_rank: gram_rank(&block, ratio)? });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankExperimentConfig {
    pub snr: Vec<f64>,
    pub runs: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for RankExperimentConfig {
    fn default() -> Self {
        Self { snr: (0..7).map(|i| 30.0 + 5.0 * i as f64).collect(), runs: 100, ratio: 0.01, seed: 0 }
    }
}

impl RankExperimentConfig {
    pub const FULL_RUNS: usize = 1000;

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.runs == 0 {
            return Err(Error::invalid("rank experiment needs at least one run"));
        }
        if self.snr.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("every SNR must be positive and finite"));
        }
        Ok(())
    }
}

/// One row of the rank table. `block_rank` is the mean over runs; the
/// min and max make "constant at one" checkable without float tricks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub tube_id: usize,
    pub snr: f64,
    pub mean_pixel_rank: f64,
    pub block_rank: f64,
    pub stderr_pixel_rank: f64,
    pub block_rank_min: usize,
    pub block_rank_max: usize,
    pub runs: usize,
    pub seed: u64,
}

/// Monte-Carlo rank sweep. Noise is complex Gaussian with standard
/// deviation `mean(|phantom|) / snr` over the whole image; only tube voxels
/// are perturbed since nothing else enters the ranks. Run `r` at SNR index
/// `s` uses stream `s * runs + r` of a generator seeded with `cfg.seed`.
pub fn rank_experiment(spec: &PhantomSpec, cfg: &RankExperimentConfig) -> Result<Vec<RankRow>> {
    cfg.validate()?;
    let phantom = generate_phantom(spec)?;
    let x = &phantom.series;
    let mean = x.data().iter().map(|z| z.norm()).sum::<f64>() / x.data().len() as f64;
    let n_tubes = spec.tubes.len();
    let tube_voxels: Vec<usize> = (0..x.n_voxels()).filter(|&v| phantom.truth.tube[v].is_some()).collect();
    let mut rows = Vec::with_capacity(n_tubes * cfg.snr.len());
    for (si, &snr) in cfg.snr.iter().enumerate() {
        let normal = Normal::new(0.0, mean / snr / std::f64::consts::SQRT_2)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        let per_run: Vec<Vec<TubeRanks>> = (0..cfg.runs)
            .into_par_iter()
            .map(|run| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((si * cfg.runs + run) as u64);
                let mut noisy = x.clone();
                for e in 0..noisy.n_tsl() {
                    let echo = noisy.echo_mut(e);
                    for &v in &tube_voxels {
                        echo[v] += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    }
                }
                tube_ranks(&noisy, &phantom.truth, cfg.ratio)
            })
            .collect::<Result<_>>()?;
        let runs = cfg.runs as f64;
        for id in 0..n_tubes {
            let pix: Vec<f64> = per_run.iter().map(|r| r[id].mean_pixel_rank).collect();
            let blk: Vec<usize> = per_run.iter().map(|r| r[id].block_rank).collect();
            let mean_pix = pix.iter().sum::<f64>() / runs;
            let stderr = if cfg.runs > 1 {
                let var = pix.iter().map(|p| (p - mean_pix).powi(2)).sum::<f64>() / (runs - 1.0);
                (var / runs).sqrt()
            } else {
                0.0
            };
            rows.push(RankRow {
                tube_id: id,
                snr,
                mean_pixel_rank: mean_pix,
                block_rank: blk.iter().sum::<usize>() as f64 / runs,
                stderr_pixel_rank: stderr,
                block_rank_min: *blk.iter().min().unwrap(),
                block_rank_max: *blk.iter().max().unwrap(),
                runs: cfg.runs,
                seed: cfg.seed,
            });
        }
    }
    Ok(rows)
}

pub const RANK_CSV_HEADER: &str = "tube_id,snr,mean_pixel_rank,block_rank,stderr_pixel_rank,runs,seed";

pub fn rank_rows_to_csv(rows: &[RankRow]) -> String {
    let mut s = String::from(RANK_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.tube_id, r.snr, r.mean_pixel_rank, r.block_rank, r.stderr_pixel_rank, r.runs, r.seed
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::fit_map;
    use proptest::prelude::*;

    #[test]
    fn default_tubes_are_disjoint_and_inside() {
        PhantomSpec::mono().validate().unwrap();
        PhantomSpec::bi().validate().unwrap();
        let mut spec = PhantomSpec::mono();
        spec.tubes[1].center = spec.tubes[0].center;
        spec.tubes[1].center[0] += 30.0;
        assert!(generate_phantom(&spec).is_err());
        let mut spec = PhantomSpec::mono();
        spec.tubes[0].center = [5.0, 96.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn analytic_voxel_values() {
        let p = generate_phantom(&PhantomSpec::mono()).unwrap();
        let spec = PhantomSpec::mono();
        let [cx, cy] = spec.tubes[0].center;
        let v = p.series.grid().index(cx.round() as usize, cy.round() as usize, 0);
        assert_eq!(p.truth.tube[v], Some(0));
        assert!((p.series.at(v, 0).re - (-1.0f64 / 77.0).exp()).abs() < 1e-15);
        assert!(p.series.signal(0).iter().all(|z| *z == Complex64::default()));
        let counts: Vec<usize> = (0..5).map(|i| p.truth.tube_voxels(i).len()).collect();
        // Disk of radius 20 sampled on the integer lattice holds ~pi r^2 voxels.
        for c in counts {
            assert!((c as f64 - std::f64::consts::PI * 400.0).abs() < 40.0, "{c}");
        }
    }

    #[test]
    fn bi_phantom_uses_both_components() {
        let p = generate_phantom(&PhantomSpec::bi()).unwrap();
        let v = p.truth.tube_voxels(2)[0];
        let tsl = DEFAULT_TSL_MS;
        for (e, t) in tsl.iter().enumerate() {
            let want = 0.91 * (-t / 79.0).exp() + 0.09 * (-t / 20.0).exp();
            assert!((p.series.at(v, e).re - want).abs() < 1e-14);
        }
        assert_eq!(p.truth.t1rho_short.as_ref().unwrap()[v], 20.0);
    }

    #[test]
    fn fit_recovers_tube_values() {
        let p = generate_phantom(&PhantomSpec::mono()).unwrap();
        let maps = fit_map(&p.series, &p.truth.support()).unwrap();
        for (id, want) in MONO_T1RHO_MS.iter().enumerate() {
            for v in p.truth.tube_voxels(id) {
                assert!((maps.t1rho[v] - want).abs() / want < 1e-6);
                assert!((maps.m0[v] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(estimate_rank(&ComplexMatrix::identity(3, 3), 0.01).unwrap(), 3);
        let u = ComplexMatrix::from_fn(4, 1, |i, _| Complex64::new(i as f64 + 1.0, 0.5));
        let w = ComplexMatrix::from_fn(1, 6, |_, j| Complex64::new(1.0, j as f64));
        assert_eq!(estimate_rank(&(&u * &w), 0.01).unwrap(), 1);
        assert_eq!(estimate_rank(&ComplexMatrix::zeros(3, 3), 0.01).unwrap(), 0);
        assert!(estimate_rank(&ComplexMatrix::identity(3, 3), 1.0).is_err());
        // Tube-1 bi-exponential on a uniform 20 ms grid.
        let tsl: Vec<f64> = (0..5).map(|i| 20.0 * i as f64).collect();
        let s: Vec<Complex64> = bi_model(BiExpParams { m0: 1.0, t1rho_long: 77.0, t1rho_short: 18.0, alpha: 0.91 }, &tsl)
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect();
        let h = build_hankel(&s, HankelSpec::for_echoes(5)).unwrap();
        assert_eq!(estimate_rank(&h, 0.01).unwrap(), 2);
    }

    #[test]
    fn gram_rank_agrees_with_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for scale in [1e-4, 1e-2, 1.0] {
            let a = ComplexMatrix::from_fn(3, 1, |_, _| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
            let b = ComplexMatrix::from_fn(1, 9, |_, _| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
            let e = ComplexMatrix::from_fn(3, 9, |_, _| {
                Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)) * scale
            });
            let m = &(&a * &b) + &e;
            let mut g = ComplexMatrix::zeros(3, 3);
            add_outer(&mut g, &m);
            for ratio in [0.001, 0.01, 0.1] {
                assert_eq!(gram_rank(&g, ratio).unwrap(), estimate_rank(&m, ratio).unwrap());
            }
        }
    }

    #[test]
    fn noiseless_ranks() {
        let p = generate_phantom(&PhantomSpec::mono()).unwrap();
        for r in tube_ranks(&p.series, &p.truth, 0.01).unwrap() {
            assert_eq!(r.block_rank, 1);
            assert_eq!(r.mean_pixel_rank, 1.0);
        }
        // Every voxel of a tube carries the same curve, so the block rank
        // must match the SVD rank of any single voxel's Hankel matrix.
        let p = generate_phantom(&PhantomSpec::bi()).unwrap();
        let ranks = tube_ranks(&p.series, &p.truth, 0.01).unwrap();
        for (id, r) in ranks.iter().enumerate() {
            let v = p.truth.tube_voxels(id)[0];
            let h = build_hankel(&p.series.signal(v), HankelSpec::for_echoes(5)).unwrap();
            assert_eq!(r.block_rank, estimate_rank(&h, 0.01).unwrap());
            assert_eq!(r.block_rank, estimate_rank(&h, 0.001).unwrap().min(r.block_rank));
        }
    }

    #[test]
    fn small_sweep_is_reproducible_and_ordered() {
        let cfg = RankExperimentConfig { snr: vec![30.0, 60.0], runs: 8, ratio: 0.01, seed: 3 };
        let a = rank_experiment(&PhantomSpec::mono(), &cfg).unwrap();
        assert_eq!(a, rank_experiment(&PhantomSpec::mono(), &cfg).unwrap());
        assert_eq!(a.len(), 10);
        for row in &a {
            assert_eq!((row.block_rank_min, row.block_rank_max), (1, 1));
            assert!(row.mean_pixel_rank >= 1.0);
        }
        assert!(a[..5].iter().any(|r| r.mean_pixel_rank > 1.0));
        let csv = rank_rows_to_csv(&a);
        assert_eq!(csv.lines().next().unwrap(), RANK_CSV_HEADER);
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn undersampling_round_trip() {
        let p = generate_phantom(&PhantomSpec::mono().rescaled(Grid::new_2d(48, 48).unwrap())).unwrap();
        let y = undersample_experiment(&p.series, &MaskSpec::lines(1.0, 0)).unwrap();
        let back = crate::encoding::adjoint(&y, &CoilSensitivities::Identity).unwrap();
        for (a, b) in back.data().iter().zip(p.series.data()) {
            assert!((a - b).norm() < 1e-12);
        }
        let y = undersample_experiment(&p.series, &MaskSpec::lines(4.0, 0)).unwrap();
        let frac = y.mask().sampled_count() as f64 / y.mask().data().len() as f64;
        assert!((frac - 0.25).abs() < 0.02 * 0.25 + 1e-9, "{frac}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rank_is_scale_invariant(scale in 1e-6f64..1e6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let m = ComplexMatrix::from_fn(3, 6, |_, _| Complex64::new(normal.sample(&mut rng), 0.0));
            let scaled = ComplexMatrix::from_fn(3, 6, |i, j| m[(i, j)] * scale);
            prop_assert_eq!(estimate_rank(&m, 0.01).unwrap(), estimate_rank(&scaled, 0.01).unwrap());
        }
    }
}
