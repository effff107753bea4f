//! Exponential relaxation models and per-voxel Levenberg-Marquardt fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{Grid, ImageSeries};
use crate::error::{Error, Result};

pub const T1RHO_MIN_MS: f64 = 1.0;
pub const T1RHO_MAX_MS: f64 = 1000.0;
const MAX_ITERATIONS: usize = 200;
const RELATIVE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonoExpParams {
    pub m0: f64,
    pub t1rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiExpParams {
    pub m0: f64,
    pub t1rho_long: f64,
    pub t1rho_short: f64,
    /// Fraction of the long component.
    pub alpha: f64,
}

impl BiExpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1rho_long > self.t1rho_short && self.t1rho_short > 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("invalid bi-exponential parameters {self:?}")));
        }
        Ok(())
    }
}

pub fn mono_model(p: MonoExpParams, tsl_ms: &[f64]) -> Vec<f64> {
    tsl_ms.iter().map(|t| p.m0 * (-t / p.t1rho).exp()).collect()
}

pub fn bi_model(p: BiExpParams, tsl_ms: &[f64]) -> Vec<f64> {
    tsl_ms
        .iter()
        .map(|t| p.m0 * ((1.0 - p.alpha) * (-t / p.t1rho_short).exp() + p.alpha * (-t / p.t1rho_long).exp()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonoFit {
    pub params: MonoExpParams,
    /// Final sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Signal carried no information (all zero).
    pub degenerate: bool,
    /// T1rho ended on one of its bounds.
    pub clamped: bool,
}

/// Columns of the Jacobian of the model with respect to `(m0, t1rho)`.
pub fn jacobian(p: MonoExpParams, tsl_ms: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let e: Vec<f64> = tsl_ms.iter().map(|t| (-t / p.t1rho).exp()).collect();
    let dt = tsl_ms
        .iter()
        .zip(&e)
        .map(|(t, e)| p.m0 * e * t / (p.t1rho * p.t1rho))
        .collect();
    (e, dt)
}

fn cost(p: MonoExpParams, signal: &[f64], tsl_ms: &[f64]) -> f64 {
    tsl_ms
        .iter()
        .zip(signal)
        .map(|(t, s)| {
            let r = p.m0 * (-t / p.t1rho).exp() - s;
            r * r
        })
        .sum()
}

fn clamp_t(t: f64) -> f64 {
    t.clamp(T1RHO_MIN_MS, T1RHO_MAX_MS)
}

/// Two-point log-linear estimate from the first and last echoes.
fn initial_guess(signal: &[f64], tsl_ms: &[f64]) -> MonoExpParams {
    let (s0, s1) = (signal[0], signal[signal.len() - 1]);
    let span = tsl_ms[tsl_ms.len() - 1] - tsl_ms[0];
    let t1rho = if s0 > 0.0 && s1 > 0.0 && s0 > s1 {
        clamp_t(span / (s0 / s1).ln())
    } else if s0 > 0.0 && s1 > 0.0 {
        T1RHO_MAX_MS
    } else {
        // No usable decay ratio; start mid-range.
        100.0
    };
    MonoExpParams { m0: s0.max(0.0), t1rho }
}

/// Fits `M0 exp(-t / T1rho)` to a magnitude signal.
pub fn fit_mono(signal: &[f64], tsl_ms: &[f64]) -> Result<MonoFit> {
    fit_mono_traced(signal, tsl_ms).map(|(f, _)| f)
}

/// As `fit_mono`, also returning the cost after every accepted step.
pub(crate) fn fit_mono_traced(signal: &[f64], tsl_ms: &[f64]) -> Result<(MonoFit, Vec<f64>)> {
    if tsl_ms.len() < 2 || signal.len() != tsl_ms.len() {
        return Err(Error::invalid(format!(
            "fit needs at least 2 echoes and one value per echo, got {} values for {} echoes",
            signal.len(),
            tsl_ms.len()
        )));
    }
    if signal.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("signal contains non-finite values".into()));
    }
    if signal.iter().all(|&s| s == 0.0) {
        let fit = MonoFit {
            params: MonoExpParams { m0: 0.0, t1rho: T1RHO_MIN_MS },
            cost: 0.0,
            iterations: 0,
            converged: true,
            degenerate: true,
            clamped: true,
        };
        return Ok((fit, vec![0.0]));
    }

    let scale: f64 = signal.iter().map(|s| s * s).sum();
    let mut p = initial_guess(signal, tsl_ms);
    let mut c = cost(p, signal, tsl_ms);
    let mut trace = vec![c];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if c <= 1e-30 * scale {
            converged = true;
            break;
        }
        let (ja, jt) = jacobian(p, tsl_ms);
        let r: Vec<f64> = mono_model(p, tsl_ms).iter().zip(signal).map(|(m, s)| m - s).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (aa, at, tt) = (dot(&ja, &ja), dot(&ja, &jt), dot(&jt, &jt));
        let (ga, gt) = (dot(&ja, &r), dot(&jt, &r));
        let mut accepted = false;
        while lambda < 1e16 {
            // Marquardt scaling keeps the step invariant to signal amplitude.
            let a11 = aa * (1.0 + lambda);
            let a22 = tt * (1.0 + lambda);
            let det = a11 * a22 - at * at;
            if det > 0.0 && det.is_finite() {
                let da = -(a22 * ga - at * gt) / det;
                let dt = -(a11 * gt - at * ga) / det;
                let q = MonoExpParams { m0: (p.m0 + da).max(0.0), t1rho: clamp_t(p.t1rho + dt) };
                let cq = cost(q, signal, tsl_ms);
                if cq <= c {
                    let change = (c - cq) / c;
                    let moved = q != p;
                    p = q;
                    c = cq;
                    trace.push(c);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if change < RELATIVE_TOL || !moved {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at any damping: a stationary point.
            converged = true;
        }
        if converged {
            break;
        }
    }
    let clamped = p.t1rho <= T1RHO_MIN_MS || p.t1rho >= T1RHO_MAX_MS;
    Ok((MonoFit { params: p, cost: c, iterations, converged, degenerate: false, clamped }, trace))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fitted: usize,
    pub non_converged: usize,
    pub degenerate: usize,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMaps {
    pub grid: Grid,
    pub t1rho: Vec<f64>,
    pub m0: Vec<f64>,
    pub report: FitReport,
}

/// Fits every foreground voxel of the magnitude series; background is 0.
pub fn fit_map(x: &ImageSeries, support: &[bool]) -> Result<ParameterMaps> {
    let n = x.n_voxels();
    if support.len() != n {
        return Err(Error::shape(format!("support has {} voxels, series has {n}", support.len())));
    }
    let tsl = x.tsl_ms();
    let fits: Vec<Option<MonoFit>> = (0..n)
        .into_par_iter()
        .map(|v| {
            if !support[v] {
                return Ok(None);
            }
            let s: Vec<f64> = (0..x.n_tsl()).map(|e| x.at(v, e).norm()).collect();
            fit_mono(&s, tsl).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut report = FitReport::default();
    let mut t1rho = vec![0.0; n];
    let mut m0 = vec![0.0; n];
    for (v, f) in fits.iter().enumerate() {
        if let Some(f) = f {
            report.fitted += 1;
            report.non_converged += usize::from(!f.converged);
            report.degenerate += usize::from(f.degenerate);
            report.clamped += usize::from(f.clamped);
            t1rho[v] = f.params.t1rho;
            m0[v] = f.params.m0;
        }
    }
    Ok(ParameterMaps { grid: x.grid(), t1rho, m0, report })
}
