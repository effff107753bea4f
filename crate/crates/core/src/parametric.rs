//! Tissue clustering and the parametric Hankel-tensor operator.
//!
//! Voxels whose relaxation values fall in the same histogram bin form one
//! group. Each voxel's temporal signal becomes a Hankel matrix, and the
//! matrices of a group are stacked along the first tensor mode.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::encoding::{Grid, ImageSeries};
use crate::error::{Error, Result};
use crate::tensor::{ComplexMatrix, Tensor3};

pub const DEFAULT_GROUPS: usize = 60;
/// Fraction of the first-echo peak magnitude below which a voxel is background.
pub const SUPPORT_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissuePartition {
    pub grid: Grid,
    pub n_groups: usize,
    /// `n_groups + 1` bin edges in ms.
    pub edges: Vec<f64>,
    /// Group label per voxel, `None` for background.
    pub labels: Vec<Option<u16>>,
}

impl TissuePartition {
    /// Voxel indices of every group in ascending order; empty groups stay empty.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (v, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                out[*l as usize].push(v);
            }
        }
        out
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Labels as a uint16 image with `u16::MAX` marking background.
    pub fn label_image(&self) -> Vec<u16> {
        self.labels.iter().map(|l| l.unwrap_or(u16::MAX)).collect()
    }
}

/// Foreground mask: first-echo magnitude above 5% of its maximum.
pub fn support_mask(x: &ImageSeries) -> Vec<bool> {
    let mag = x.magnitude_echo(0);
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return vec![false; mag.len()];
    }
    mag.iter().map(|&m| m > SUPPORT_FRACTION * peak).collect()
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Equal-width histogram bins between the 1st and 99th percentile of the
/// foreground values; values outside the range go to the end bins.
///
/// A constant foreground puts every voxel in group 0.
pub fn cluster_tissues(map: &[f64], support: &[bool], grid: Grid, n_groups: usize) -> Result<TissuePartition> {
    if n_groups == 0 || n_groups > u16::MAX as usize {
        return Err(Error::invalid(format!("group count must be in 1..{}, got {n_groups}", u16::MAX)));
    }
    if map.len() != grid.n_voxels() || support.len() != grid.n_voxels() {
        return Err(Error::shape(format!(
            "map has {} and support {} voxels, grid {grid} has {}",
            map.len(),
            support.len(),
            grid.n_voxels()
        )));
    }
    let mut fg: Vec<f64> = map.iter().zip(support).filter(|(_, &s)| s).map(|(&m, _)| m).collect();
    if fg.is_empty() {
        return Err(Error::invalid("support mask is empty"));
    }
    if fg.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("parameter map has non-finite values inside the support"));
    }
    fg.sort_by(f64::total_cmp);
    let lo = percentile(&fg, 1.0);
    let hi = percentile(&fg, 99.0);
    let width = (hi - lo) / n_groups as f64;
    let edges = (0..=n_groups).map(|i| lo + width * i as f64).collect();
    let labels = map
        .iter()
        .zip(support)
        .map(|(&m, &s)| {
            s.then(|| {
                if width > 0.0 {
                    (((m - lo) / width).floor().max(0.0) as usize).min(n_groups - 1) as u16
                } else {
                    0
                }
            })
        })
        .collect();
    Ok(TissuePartition { grid, n_groups, edges, labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HankelSpec {
    pub k: usize,
}

impl HankelSpec {
    /// `k = ceil(N_TSL / 2)`.
    pub fn for_echoes(n_tsl: usize) -> Self {
        Self { k: n_tsl.div_ceil(2) }
    }

    pub fn new(k: usize, n_tsl: usize) -> Result<Self> {
        if k == 0 || k > n_tsl {
            return Err(Error::invalid(format!("Hankel column count {k} must be in 1..={n_tsl}")));
        }
        Ok(Self { k })
    }

    pub fn rows(&self, n_tsl: usize) -> usize {
        n_tsl + 1 - self.k
    }

    /// Number of Hankel entries that hold sample `m`.
    pub fn multiplicity(&self, n_tsl: usize) -> Vec<u32> {
        let rows = self.rows(n_tsl);
        let mut c = vec![0; n_tsl];
        for q in 0..self.k {
            for p in 0..rows {
                c[p + q] += 1;
            }
        }
        c
    }
}

/// `(N_TSL - k + 1) x k` matrix with entry `(p, q) = signal[p + q]`.
pub fn build_hankel(signal: &[Complex64], spec: HankelSpec) -> Result<ComplexMatrix> {
    if spec.k == 0 || spec.k > signal.len() {
        return Err(Error::invalid(format!(
            "Hankel column count {} does not fit a signal of length {}",
            spec.k,
            signal.len()
        )));
    }
    Ok(ComplexMatrix::from_fn(spec.rows(signal.len()), spec.k, |p, q| signal[p + q]))
}

fn check_partition(x_grid: &Grid, part: &TissuePartition, n_tsl: usize, spec: HankelSpec) -> Result<()> {
    x_grid.check_same(&part.grid)?;
    if part.labels.len() != part.grid.n_voxels() {
        return Err(Error::Conformance("partition label count does not match its grid".into()));
    }
    if part.labels.iter().flatten().any(|&l| l as usize >= part.n_groups) {
        return Err(Error::Conformance("partition label out of range".into()));
    }
    HankelSpec::new(spec.k, n_tsl).map(|_| ())
}

/// `H_j(X)` for every populated group, in group order.
pub fn extract_parametric_tensors(x: &ImageSeries, part: &TissuePartition, spec: HankelSpec) -> Result<Vec<Tensor3>> {
    check_partition(&x.grid(), part, x.n_tsl(), spec)?;
    Ok(part
        .members()
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| extract_group(x, m, spec))
        .collect())
}

pub(crate) fn extract_group(x: &ImageSeries, members: &[usize], spec: HankelSpec) -> Tensor3 {
    let rows = spec.rows(x.n_tsl());
    let nv = members.len();
    let mut data = Vec::with_capacity(nv * rows * spec.k);
    for q in 0..spec.k {
        for p in 0..rows {
            let echo = x.echo(p + q);
            data.extend(members.iter().map(|&v| echo[v]));
        }
    }
    Tensor3::new([nv, rows, spec.k], data).expect("Hankel tensor dims are consistent")
}

/// Adds `H_j^T(t)` into an echo-major accumulator.
pub(crate) fn scatter_group(acc: &mut [Complex64], n_voxels: usize, t: &Tensor3, members: &[usize]) {
    let [nv, rows, k] = t.dims();
    let data = t.data();
    for q in 0..k {
        for p in 0..rows {
            let echo = &mut acc[(p + q) * n_voxels..(p + q + 1) * n_voxels];
            let fiber = &data[nv * (p + rows * q)..nv * (p + rows * q + 1)];
            for (&v, val) in members.iter().zip(fiber) {
                echo[v] += val;
            }
        }
    }
}

fn populated_members(part: &TissuePartition, tensors: &[Tensor3], n_tsl: usize, spec: HankelSpec) -> Result<Vec<Vec<usize>>> {
    let members: Vec<Vec<usize>> = part.members().into_iter().filter(|m| !m.is_empty()).collect();
    if members.len() != tensors.len() {
        return Err(Error::Conformance(format!(
            "{} Hankel tensors for {} populated groups",
            tensors.len(),
            members.len()
        )));
    }
    let rows = spec.rows(n_tsl);
    for (j, (t, m)) in tensors.iter().zip(&members).enumerate() {
        if t.dims() != [m.len(), rows, spec.k] {
            return Err(Error::Conformance(format!(
                "Hankel tensor {j} has dims {:?}, group expects {:?}",
                t.dims(),
                [m.len(), rows, spec.k]
            )));
        }
    }
    Ok(members)
}

/// Exact adjoint `sum_j H_j^T`: every Hankel entry is added back to its sample.
pub fn hankel_scatter_sum(
    tensors: &[Tensor3],
    part: &TissuePartition,
    spec: HankelSpec,
    tsl_ms: &[f64],
) -> Result<ImageSeries> {
    let n_tsl = tsl_ms.len();
    HankelSpec::new(spec.k, n_tsl)?;
    let members = populated_members(part, tensors, n_tsl, spec)?;
    let n = part.grid.n_voxels();
    let mut acc = vec![Complex64::default(); n * n_tsl];
    for (t, m) in tensors.iter().zip(&members) {
        scatter_group(&mut acc, n, t, m);
    }
    ImageSeries::new(part.grid, tsl_ms.to_vec(), acc)
}

/// Anti-diagonal averaging back to voxel signals; background stays 0.
pub fn hankel_adjoint(
    tensors: &[Tensor3],
    part: &TissuePartition,
    spec: HankelSpec,
    tsl_ms: &[f64],
) -> Result<ImageSeries> {
    let mut x = hankel_scatter_sum(tensors, part, spec, tsl_ms)?;
    let mult = spec.multiplicity(tsl_ms.len());
    for (e, &c) in mult.iter().enumerate() {
        for v in x.echo_mut(e) {
            *v /= c as f64;
        }
    }
    Ok(x)
}

/// Diagonal of `sum_j H_j^T H_j`, echo-major; zero for background voxels.
pub fn multiplicity_counts(spec: HankelSpec, part: &TissuePartition, n_tsl: usize) -> Vec<u32> {
    let mult = spec.multiplicity(n_tsl);
    let n = part.grid.n_voxels();
    let mut out = vec![0; n * n_tsl];
    for (e, &c) in mult.iter().enumerate() {
        for (v, l) in part.labels.iter().enumerate() {
            if l.is_some() {
                out[e * n + v] = c;
            }
        }
    }
    out
}
