//! ADMM reconstruction coupling spatial patch tensors and parametric Hankel
//! tensors.
//!
//! Each iteration groups similar patches of `X + A1/mu1`, denoises the group
//! tensors, denoises the Hankel tensors of every tissue group, then solves the
//! quadratic data-consistency problem for `X` and takes one ascent step on the
//! multipliers.
//!
//! The spatial multiplier is held as one image `A1` whose extraction
//! `P_i(A1)` gives the group multipliers. The grouping changes every
//! iteration, so this is the tensor multiplier projected onto the range of
//! the current extraction operator; the normal-equation term `P^T alpha1`
//! is exact. The parametric multiplier is kept as tensors and projected the
//! same way whenever the tissue partition is refreshed.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{CoilSensitivities, Encoder, Grid, ImageSeries, KSpaceData};
use crate::error::{Error, Result};
use crate::fitting::fit_map;
use crate::parametric::{
    cluster_tissues, extract_parametric_tensors, hankel_adjoint, hankel_scatter_sum, multiplicity_counts,
    support_mask, HankelSpec, TissuePartition, DEFAULT_GROUPS,
};
use crate::patching::{block_match, coverage_counts, extract_group, scatter_group, PatchConfig, PatchGroupIndex};
use crate::tensor::{hosvd_denoise, hosvd_denoise_absolute, Tensor3};

/// Groups denoised per parallel batch before their scatter.
const P2_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    Smart,
    SpatialOnly,
    ParametricOnly,
}

impl ReconMode {
    pub fn uses_spatial(self) -> bool {
        matches!(self, Self::Smart | Self::SpatialOnly)
    }

    pub fn uses_parametric(self) -> bool {
        matches!(self, Self::Smart | Self::ParametricOnly)
    }
}

/// How the per-mode lambdas become core thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `lambda` times the largest singular value of each tensor's unfolding.
    Relative,
    /// `lambda` times the peak magnitude of the zero-filled image, fixed for
    /// the whole run.
    #[default]
    Absolute,
}

/// A resolved hard-threshold for one family of tensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Relative([f64; 3]),
    Absolute([f64; 3]),
}

impl Threshold {
    pub fn new(rule: ThresholdRule, lambdas: [f64; 3], scale: f64) -> Self {
        match rule {
            ThresholdRule::Relative => Threshold::Relative(lambdas),
            ThresholdRule::Absolute => Threshold::Absolute(lambdas.map(|l| l * scale)),
        }
    }

    pub fn denoise(&self, t: &Tensor3) -> Result<Tensor3> {
        match *self {
            Threshold::Relative(l) => hosvd_denoise(t, l),
            Threshold::Absolute(l) => hosvd_denoise_absolute(t, l),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub admm_iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    /// Per-mode thresholds for the spatial tensors, read through `threshold_rule`.
    pub lambda1: [f64; 3],
    /// Per-mode thresholds for the parametric tensors.
    pub lambda2: [f64; 3],
    #[serde(default)]
    pub threshold_rule: ThresholdRule,
    pub mu1: f64,
    pub mu2: f64,
    pub patch: PatchConfig,
    pub n_groups: usize,
    /// Hankel column count; `None` picks `ceil(N_TSL / 2)`.
    pub hankel_k: Option<usize>,
    pub mode: ReconMode,
    /// Iterations between refits of the T1rho map that drives the partition.
    pub refit_period: usize,
}

impl ReconConfig {
    pub fn default_2d() -> Self {
        Self {
            admm_iters: 15,
            cg_iters: 15,
            cg_tol: 1e-7,
            lambda1: [0.2, 0.1, 0.1],
            lambda2: [0.05, 0.01, 0.01],
            threshold_rule: ThresholdRule::default(),
            mu1: 0.01,
            mu2: 0.01,
            patch: PatchConfig::default_2d(),
            n_groups: DEFAULT_GROUPS,
            hankel_k: None,
            mode: ReconMode::Smart,
            refit_period: 3,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            lambda1: [0.15, 0.1, 0.1],
            patch: PatchConfig::default_3d(),
            ..Self::default_2d()
        }
    }

    pub fn default_for(grid: &Grid) -> Self {
        if grid.is_3d() {
            Self::default_3d()
        } else {
            Self::default_2d()
        }
    }

    pub fn hankel_spec(&self, n_tsl: usize) -> Result<HankelSpec> {
        match self.hankel_k {
            Some(k) => HankelSpec::new(k, n_tsl),
            None => Ok(HankelSpec::for_echoes(n_tsl)),
        }
    }

    pub fn validate(&self, grid: &Grid, n_tsl: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(what.to_string()));
        if self.admm_iters == 0 || self.cg_iters == 0 {
            return bad("ADMM and CG iteration counts must be at least 1");
        }
        if !(self.cg_tol > 0.0) {
            return bad("CG tolerance must be positive");
        }
        if self.lambda1.iter().chain(&self.lambda2).any(|l| !(*l >= 0.0)) {
            return bad("threshold ratios must be nonnegative");
        }
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0) {
            return bad("penalty parameters must be nonnegative");
        }
        if self.refit_period == 0 || self.n_groups == 0 {
            return bad("refit period and group count must be at least 1");
        }
        if self.mode.uses_spatial() {
            if self.mu1 == 0.0 {
                return bad("spatial term needs mu1 > 0");
            }
            self.patch.validate(grid)?;
        }
        if self.mode.uses_parametric() && self.mu2 == 0.0 && self.mode == ReconMode::ParametricOnly {
            return bad("parametric term needs mu2 > 0");
        }
        self.hankel_spec(n_tsl).map(|_| ())
    }
}

/// Result of a conjugate-residual solve.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<Complex64>,
    pub iterations: usize,
    /// Relative residual norms, starting with the initial guess.
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// A direction with no curvature stopped the iteration early.
    pub breakdown: bool,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Conjugate-residual iteration for a Hermitian positive (semi)definite
/// operator. It spans the same Krylov space as plain CG but minimizes the
/// residual norm, so the residual never grows.
pub fn conjugate_residual(
    mut apply: impl FnMut(&[Complex64], &mut [Complex64]),
    b: &[Complex64],
    x0: Vec<Complex64>,
    max_iter: usize,
    tol: f64,
) -> CgOutcome {
    let n = b.len();
    let mut x = x0;
    let b_norm = norm(b);
    let mut ax = vec![Complex64::default(); n];
    apply(&x, &mut ax);
    let mut r: Vec<Complex64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let mut residuals = vec![norm(&r) / scale];
    if residuals[0] <= tol {
        return CgOutcome { x, iterations: 0, residuals, converged: true, breakdown: false };
    }
    let mut ar = vec![Complex64::default(); n];
    apply(&r, &mut ar);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar).re;
    let (mut converged, mut breakdown) = (false, false);
    let mut iterations = 0;
    while iterations < max_iter {
        let apap = dot(&ap, &ap).re;
        if !(rar > 0.0 && apap > 0.0) {
            breakdown = true;
            break;
        }
        iterations += 1;
        let alpha = rar / apap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        residuals.push(norm(&r) / scale);
        if *residuals.last().unwrap() <= tol {
            converged = true;
            break;
        }
        apply(&r, &mut ar);
        let rar_next = dot(&r, &ar).re;
        let beta = rar_next / rar;
        rar = rar_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    CgOutcome { x, iterations, residuals, converged, breakdown }
}

/// Solves `(E^H E + diag(weights)) X = rhs` from the warm start `x0`.
pub fn solve_p1(
    encoder: &Encoder,
    x0: &ImageSeries,
    rhs: &[Complex64],
    weights: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<(ImageSeries, CgOutcome)> {
    let len = x0.data().len();
    if rhs.len() != len || weights.len() != len {
        return Err(Error::shape(format!(
            "normal equations need {len} entries, got rhs {} and weights {}",
            rhs.len(),
            weights.len()
        )));
    }
    let outcome = conjugate_residual(
        |v, out| {
            encoder.normal(v, out);
            for ((o, v), w) in out.iter_mut().zip(v).zip(weights) {
                *o += v * w;
            }
        },
        rhs,
        x0.data().to_vec(),
        max_iter,
        tol,
    );
    if outcome.x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numerical("CG produced non-finite values".into()));
    }
    Ok((x0.with_data(outcome.x.clone())?, outcome))
}

fn offset_image(x: &ImageSeries, multiplier: &ImageSeries, mu: f64) -> Result<ImageSeries> {
    let data = x.data().iter().zip(multiplier.data()).map(|(x, a)| x + a / mu).collect();
    x.with_data(data)
}

/// Denoised group tensors of `target` (which already includes the multiplier).
pub fn solve_p2(target: &ImageSeries, index: &PatchGroupIndex, threshold: Threshold) -> Result<Vec<Tensor3>> {
    target.grid().check_same(&index.grid)?;
    index.validate()?;
    let offsets = index.offsets();
    index
        .groups
        .par_iter()
        .map(|g| threshold.denoise(&extract_group(target, g, &offsets)))
        .collect()
}

/// `P^T T` for the denoised tensors without keeping them all in memory.
fn solve_p2_scatter(target: &ImageSeries, index: &PatchGroupIndex, threshold: Threshold) -> Result<Vec<Complex64>> {
    target.grid().check_same(&index.grid)?;
    index.validate()?;
    let offsets = index.offsets();
    let n = target.n_voxels();
    let mut acc = vec![Complex64::default(); target.data().len()];
    for batch in index.groups.chunks(P2_BATCH) {
        let denoised: Vec<Tensor3> = batch
            .par_iter()
            .map(|g| threshold.denoise(&extract_group(target, g, &offsets)))
            .collect::<Result<_>>()?;
        for (t, g) in denoised.iter().zip(batch) {
            scatter_group(&mut acc, n, t, g, &offsets);
        }
    }
    Ok(acc)
}

/// Spatial half of one iteration: the grouping, `P^T T` and coverage.
#[derive(Clone, Debug)]
pub struct SpatialEstimate {
    pub index: PatchGroupIndex,
    /// Scatter-sum of the denoised tensors, echo-major.
    pub scatter: Vec<Complex64>,
    pub coverage: Vec<u32>,
}

impl SpatialEstimate {
    pub fn compute(x: &ImageSeries, a1: &ImageSeries, cfg: &ReconConfig, threshold: Threshold) -> Result<Self> {
        let target = offset_image(x, a1, cfg.mu1)?;
        let index = block_match(&target.magnitude_echo(0), x.grid(), &cfg.patch)?;
        let scatter = solve_p2_scatter(&target, &index, threshold)?;
        let coverage = coverage_counts(&index);
        Ok(Self { index, scatter, coverage })
    }

    /// Averaged image of the denoised patches; uncovered voxels are 0.
    pub fn aggregate(&self, like: &ImageSeries) -> Result<ImageSeries> {
        let n = like.n_voxels();
        let data = self
            .scatter
            .iter()
            .enumerate()
            .map(|(i, s)| match self.coverage[i % n] {
                0 => Complex64::default(),
                c => s / c as f64,
            })
            .collect();
        like.with_data(data)
    }
}

/// Denoised Hankel tensors of `H_j(X) + alpha2_j / mu2` for every populated group.
pub fn solve_p3(
    x: &ImageSeries,
    alpha2: &[Tensor3],
    part: &TissuePartition,
    spec: HankelSpec,
    mu2: f64,
    threshold: Threshold,
) -> Result<Vec<Tensor3>> {
    let mut h = extract_parametric_tensors(x, part, spec)?;
    if alpha2.len() != h.len() {
        return Err(Error::Conformance(format!(
            "{} parametric multipliers for {} groups",
            alpha2.len(),
            h.len()
        )));
    }
    for (t, a) in h.iter_mut().zip(alpha2) {
        if t.dims() != a.dims() {
            return Err(Error::Conformance("parametric multiplier dims differ from its group".into()));
        }
        if mu2 > 0.0 {
            t.add_scaled(1.0 / mu2, a);
        }
    }
    h.par_iter().map(|t| threshold.denoise(t)).collect()
}

/// Ascent steps on both multipliers after the `X` update.
///
/// Spatial: `A1 += mu1 (X - T~)` on covered voxels, where `T~` is the averaged
/// image of the denoised patches. Parametric: `alpha2_j += mu2 (H_j(X) - Z_j)`.
#[allow(clippy::too_many_arguments)]
pub fn update_multipliers(
    x: &ImageSeries,
    a1: &mut ImageSeries,
    spatial: Option<&SpatialEstimate>,
    mu1: f64,
    alpha2: &mut [Tensor3],
    z: &[Tensor3],
    part: Option<&TissuePartition>,
    spec: HankelSpec,
    mu2: f64,
) -> Result<()> {
    if let Some(s) = spatial {
        let t = s.aggregate(x)?;
        let n = x.n_voxels();
        for (i, (a, (xv, tv))) in a1.data_mut().iter_mut().zip(x.data().iter().zip(t.data())).enumerate() {
            if s.coverage[i % n] == 0 {
                *a = Complex64::default();
            } else {
                *a += mu1 * (xv - tv);
            }
        }
    }
    if let Some(part) = part {
        let hx = extract_parametric_tensors(x, part, spec)?;
        if hx.len() != alpha2.len() || z.len() != alpha2.len() {
            return Err(Error::Conformance("parametric multiplier count differs from group count".into()));
        }
        for ((a, h), z) in alpha2.iter_mut().zip(&hx).zip(z) {
            if a.dims() != h.dims() || z.dims() != h.dims() {
                return Err(Error::Conformance("parametric tensor dims disagree".into()));
            }
            for ((a, h), z) in a.data_mut().iter_mut().zip(h.data()).zip(z.data()) {
                *a += mu2 * (h - z);
            }
        }
    }
    Ok(())
}

/// Moves parametric multipliers onto a new partition through image space.
fn reproject_multipliers(
    alpha2: &[Tensor3],
    old: Option<&TissuePartition>,
    new: &TissuePartition,
    spec: HankelSpec,
    tsl_ms: &[f64],
) -> Result<Vec<Tensor3>> {
    let image = match old {
        Some(old) => hankel_adjoint(alpha2, old, spec, tsl_ms)?,
        None => ImageSeries::zeros(new.grid, tsl_ms.to_vec())?,
    };
    extract_parametric_tensors(&image, new, spec)
}

/// Full solver state between iterations.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: ImageSeries,
    /// Spatial multiplier in image form.
    pub a1: ImageSeries,
    pub partition: Option<TissuePartition>,
    pub z: Vec<Tensor3>,
    pub alpha2: Vec<Tensor3>,
    pub t1rho: Vec<f64>,
    pub support: Vec<bool>,
    /// Relative change of `X` between consecutive iterations.
    pub relative_change: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `|X_n - X_{n-1}| / |X_{n-1}|`; absent for the first iteration.
    pub relative_change: Option<f64>,
    /// `|E X - Y| / |Y|`.
    pub data_residual: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x: ImageSeries,
    /// T1rho fitted to the final iterate on its support.
    pub t1rho: Vec<f64>,
    pub m0: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub patches: Option<PatchGroupIndex>,
    pub partition: Option<TissuePartition>,
}

fn stage<T>(iteration: usize, stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Solver { iteration, stage, source: Box::new(e) })
}

/// Runs the ADMM loop from the zero-filled image `E^H Y`.
pub fn reconstruct(y: &KSpaceData, coils: &CoilSensitivities, cfg: &ReconConfig) -> Result<Reconstruction> {
    let grid = y.grid();
    let n_tsl = y.n_tsl();
    cfg.validate(&grid, n_tsl)?;
    let spec = cfg.hankel_spec(n_tsl)?;
    let encoder = Encoder::new(coils.clone(), y.mask().clone())?;
    let ehy = encoder.adjoint(y)?;
    let y_norm = y.norm();
    let peak = ehy.data().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let t1 = Threshold::new(cfg.threshold_rule, cfg.lambda1, peak);
    let t2 = Threshold::new(cfg.threshold_rule, cfg.lambda2, peak);

    let mut state = SolverState {
        x: ehy.clone(),
        a1: ImageSeries::zeros(grid, y.tsl_ms().to_vec())?,
        partition: None,
        z: Vec::new(),
        alpha2: Vec::new(),
        t1rho: Vec::new(),
        support: Vec::new(),
        relative_change: Vec::new(),
    };
    let mut refit_due = cfg.mode.uses_parametric();
    let mut history = Vec::with_capacity(cfg.admm_iters);
    let mut last_index = None;

    for n in 1..=cfg.admm_iters {
        let len = state.x.data().len();
        let mut rhs = ehy.data().to_vec();
        let mut weights = vec![0.0; len];

        let spatial = if cfg.mode.uses_spatial() {
            let s = stage(n, "P2", SpatialEstimate::compute(&state.x, &state.a1, cfg, t1))?;
            let nv = grid.n_voxels();
            for i in 0..len {
                let c = s.coverage[i % nv] as f64;
                rhs[i] += cfg.mu1 * s.scatter[i] - c * state.a1.data()[i];
                weights[i] += cfg.mu1 * c;
            }
            Some(s)
        } else {
            None
        };

        if cfg.mode.uses_parametric() {
            if refit_due {
                let maps = stage(n, "T1rho fit", fit_map(&state.x, &support_mask(&state.x)))?;
                state.support = support_mask(&state.x);
                state.t1rho = maps.t1rho;
                let part = stage(n, "clustering", cluster_tissues(&state.t1rho, &state.support, grid, cfg.n_groups))?;
                state.alpha2 = stage(
                    n,
                    "clustering",
                    reproject_multipliers(&state.alpha2, state.partition.as_ref(), &part, spec, y.tsl_ms()),
                )?;
                state.partition = Some(part);
                refit_due = false;
            }
            let part = state.partition.as_ref().expect("partition built above");
            state.z = stage(n, "P3", solve_p3(&state.x, &state.alpha2, part, spec, cfg.mu2, t2))?;
            let hz = stage(n, "P3", hankel_scatter_sum(&state.z, part, spec, y.tsl_ms()))?;
            let ha = stage(n, "P3", hankel_scatter_sum(&state.alpha2, part, spec, y.tsl_ms()))?;
            let mult = multiplicity_counts(spec, part, n_tsl);
            for i in 0..len {
                rhs[i] += cfg.mu2 * hz.data()[i] - ha.data()[i];
                weights[i] += cfg.mu2 * mult[i] as f64;
            }
        }

        let (x_new, cg) = stage(n, "P1", solve_p1(&encoder, &state.x, &rhs, &weights, cfg.cg_iters, cfg.cg_tol))?;

        stage(
            n,
            "multiplier update",
            update_multipliers(
                &x_new,
                &mut state.a1,
                spatial.as_ref(),
                cfg.mu1,
                &mut state.alpha2,
                &state.z,
                state.partition.as_ref(),
                spec,
                cfg.mu2,
            ),
        )?;

        let relative_change = (n > 1).then(|| {
            let diff: f64 = x_new.data().iter().zip(state.x.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
            let prev = state.x.norm();
            if prev > 0.0 {
                diff.sqrt() / prev
            } else {
                0.0
            }
        });
        if let Some(c) = relative_change {
            state.relative_change.push(c);
        }
        state.x = x_new;

        let ex = stage(n, "P1", encoder.forward(&state.x))?;
        let data_residual = ex.data().iter().zip(y.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
            / if y_norm > 0.0 { y_norm } else { 1.0 };
        let record = IterationRecord {
            iteration: n,
            relative_change,
            data_residual,
            cg_iterations: cg.iterations,
            cg_residual: *cg.residuals.last().unwrap(),
        };
        log::info!(
            "iter {:>3}  rel-change {}  data-residual {:.4e}  cg {} ({:.2e}){}",
            n,
            relative_change.map_or("        -".into(), |c| format!("{c:.3e}")),
            data_residual,
            cg.iterations,
            record.cg_residual,
            if cg.breakdown { "  breakdown" } else { "" }
        );
        history.push(record);
        if let Some(s) = spatial {
            last_index = Some(s.index);
        }
        if n % cfg.refit_period == 0 && cfg.mode.uses_parametric() {
            refit_due = true;
        }
    }

    let support = support_mask(&state.x);
    let maps = fit_map(&state.x, &support)?;
    Ok(Reconstruction {
        x: state.x,
        t1rho: maps.t1rho,
        m0: maps.m0,
        history,
        patches: last_index,
        partition: state.partition,
    })
}
