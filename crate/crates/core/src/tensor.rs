//! Dense complex third-order tensors.
//!
//! Storage is first-index-fastest: entry `(i, j, k)` of a tensor with dims
//! `(n1, n2, n3)` lives at `i + n1 * (j + n2 * k)`.
//!
//! Unfoldings follow the Kolda-Bader column order: the indices that are not
//! the unfolding mode vary with the lowest-numbered one fastest.
//!
//! | mode | rows | column of entry `(i, j, k)` |
//! |------|------|-----------------------------|
//! | 1    | `i`  | `j + n2 * k`                |
//! | 2    | `j`  | `i + n1 * k`                |
//! | 3    | `k`  | `i + n1 * j`                |
//!
//! With this convention the mode-1 unfolding is the raw buffer read
//! column-major, which the mode products exploit.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense complex matrix used throughout the crate.
pub type ComplexMatrix = Mat<Complex64>;

const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Tensor mode (axis) selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    /// Zero-based axis index.
    pub fn axis(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }

    /// Converts a one-based mode number.
    pub fn from_number(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            _ => Err(Error::invalid(format!("tensor mode must be 1, 2 or 3, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<Complex64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<Complex64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("tensor dims must be positive, got {dims:?}")));
        }
        let len = dims[0] * dims[1] * dims[2];
        if data.len() != len {
            return Err(Error::shape(format!(
                "tensor dims {dims:?} need {len} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be positive");
        Self {
            dims,
            data: vec![Complex64::default(); dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = 0;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    t.data[idx] = f(i, j, k);
                    idx += 1;
                }
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: Complex64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Frobenius distance to another tensor of identical dims.
    pub fn distance(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius inner product `<self, other>` (conjugate-linear in `self`).
    pub fn inner(&self, other: &Tensor3) -> Complex64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor3) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    fn mode1_view(&self) -> MatRef<'_, Complex64> {
        MatRef::from_column_major_slice(&self.data, self.dims[0], self.dims[1] * self.dims[2])
    }

    fn mode3_view(&self) -> MatRef<'_, Complex64> {
        // (n1 n2) x n3 column-major; its transpose is the mode-3 unfolding.
        MatRef::from_column_major_slice(&self.data, self.dims[0] * self.dims[1], self.dims[2])
    }

    fn slice_view(&self, k: usize) -> MatRef<'_, Complex64> {
        let s = self.dims[0] * self.dims[1];
        MatRef::from_column_major_slice(&self.data[k * s..(k + 1) * s], self.dims[0], self.dims[1])
    }
}

/// Mode-`mode` matricization.
pub fn unfold(t: &Tensor3, mode: Mode) -> ComplexMatrix {
    let [n1, n2, n3] = t.dims;
    match mode {
        Mode::One => t.mode1_view().to_owned(),
        Mode::Two => {
            let mut m = Mat::zeros(n2, n1 * n3);
            for k in 0..n3 {
                for j in 0..n2 {
                    for i in 0..n1 {
                        m[(j, i + n1 * k)] = t.get(i, j, k);
                    }
                }
            }
            m
        }
        Mode::Three => t.mode3_view().transpose().to_owned(),
    }
}

/// Inverse of [`unfold`] for the same mode and dims.
pub fn fold(m: MatRef<'_, Complex64>, mode: Mode, dims: [usize; 3]) -> Result<Tensor3> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("tensor dims must be positive, got {dims:?}")));
    }
    let [n1, n2, n3] = dims;
    let rows = dims[mode.axis()];
    let cols = n1 * n2 * n3 / rows;
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::shape(format!(
            "mode-{} fold of dims {dims:?} needs a {rows}x{cols} matrix, got {}x{}",
            mode.axis() + 1,
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(Tensor3::from_fn(dims, |i, j, k| match mode {
        Mode::One => m[(i, j + n2 * k)],
        Mode::Two => m[(j, i + n1 * k)],
        Mode::Three => m[(k, i + n1 * j)],
    }))
}

/// `t ×_mode u`: replaces dimension `mode` by the row count of `u`.
pub fn mode_product(t: &Tensor3, u: MatRef<'_, Complex64>, mode: Mode) -> Result<Tensor3> {
    let [n1, n2, n3] = t.dims;
    let axis = mode.axis();
    if u.ncols() != t.dims[axis] {
        return Err(Error::shape(format!(
            "mode-{} product needs a matrix with {} columns, got {}",
            axis + 1,
            t.dims[axis],
            u.ncols()
        )));
    }
    let rows = u.nrows();
    if rows == 0 {
        return Err(Error::shape("mode product with an empty matrix"));
    }
    let mut dims = t.dims;
    dims[axis] = rows;
    let mut out = vec![Complex64::default(); dims[0] * dims[1] * dims[2]];
    match mode {
        Mode::One => {
            let dst = MatMut::from_column_major_slice_mut(&mut out, rows, n2 * n3);
            matmul(dst, Accum::Replace, u, t.mode1_view(), ONE, Par::Seq);
        }
        Mode::Two => {
            let s = n1 * rows;
            for k in 0..n3 {
                let dst = MatMut::from_column_major_slice_mut(&mut out[k * s..(k + 1) * s], n1, rows);
                matmul(dst, Accum::Replace, t.slice_view(k), u.transpose(), ONE, Par::Seq);
            }
        }
        Mode::Three => {
            let dst = MatMut::from_column_major_slice_mut(&mut out, n1 * n2, rows);
            matmul(dst, Accum::Replace, t.mode3_view(), u.transpose(), ONE, Par::Seq);
        }
    }
    Ok(Tensor3 { dims, data: out })
}

/// Gram matrix `T_(n) T_(n)^H` of an unfolding, computed without materializing it.
fn unfolding_gram(t: &Tensor3, mode: Mode) -> ComplexMatrix {
    let n = t.dims[mode.axis()];
    let mut g = Mat::<Complex64>::zeros(n, n);
    match mode {
        Mode::One => {
            let m = t.mode1_view();
            matmul(g.as_mut(), Accum::Replace, m, m.adjoint(), ONE, Par::Seq);
        }
        Mode::Two => {
            for k in 0..t.dims[2] {
                let s = t.slice_view(k);
                matmul(g.as_mut(), Accum::Add, s.transpose(), s.conjugate(), ONE, Par::Seq);
            }
        }
        Mode::Three => {
            let m = t.mode3_view();
            matmul(g.as_mut(), Accum::Replace, m.transpose(), m.conjugate(), ONE, Par::Seq);
        }
    }
    g
}

/// Eigenvectors of a Hermitian matrix, ordered by descending eigenvalue,
/// together with the largest eigenvalue.
fn descending_eigenvectors(h: &ComplexMatrix) -> Result<(ComplexMatrix, f64)> {
    let evd = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("hermitian eigendecomposition failed: {e:?}")))?;
    let n = h.nrows();
    let u = evd.U();
    let s = evd.S().column_vector();
    let largest = if n > 0 { s[n - 1].re.max(0.0) } else { 0.0 };
    let mut out = Mat::zeros(n, n);
    for c in 0..n {
        out.col_mut(c).copy_from(u.col(n - 1 - c));
    }
    Ok((out, largest))
}

/// Left singular vectors of the mode-`mode` unfolding and its largest
/// singular value. Wide unfoldings get a square unitary basis from the
/// Gram matrix; tall ones the economy basis from a thin QR.
fn mode_basis(t: &Tensor3, mode: Mode) -> Result<(ComplexMatrix, f64)> {
    let n = t.dims[mode.axis()];
    let rest = t.len() / n;
    if n <= rest {
        let g = unfolding_gram(t, mode);
        let (u, lmax) = descending_eigenvectors(&g)?;
        Ok((u, lmax.sqrt()))
    } else {
        let m = unfold(t, mode);
        let qr = m.qr();
        let q = qr.compute_thin_Q();
        let r = qr.thin_R();
        let mut g = Mat::<Complex64>::zeros(rest, rest);
        matmul(g.as_mut(), Accum::Replace, r, r.adjoint(), ONE, Par::Seq);
        let (w, lmax) = descending_eigenvectors(&g)?;
        let mut u = Mat::zeros(n, rest);
        matmul(u.as_mut(), Accum::Replace, q.as_ref(), w.as_ref(), ONE, Par::Seq);
        Ok((u, lmax.sqrt()))
    }
}

/// Core tensor and per-mode bases of a higher-order SVD.
///
/// `bases[n]` is `N_n x r_n` with orthonormal columns, where
/// `r_n = min(N_n, prod_{m != n} N_m)`; the basis is square unless the
/// unfolding is tall, in which case the missing columns would only meet
/// zero core slices.
#[derive(Clone, Debug)]
pub struct HosvdFactors {
    pub core: Tensor3,
    pub bases: [ComplexMatrix; 3],
    /// Largest singular value of each mode unfolding.
    pub leading_singular_values: [f64; 3],
}

impl HosvdFactors {
    fn zero_core_below(&mut self, threshold: f64) {
        for g in self.core.data_mut() {
            if g.norm() < threshold {
                *g = Complex64::default();
            }
        }
    }

    /// `core ×1 U1 ×2 U2 ×3 U3`.
    pub fn reconstruct(&self) -> Tensor3 {
        let mut t = self.core.clone();
        for mode in Mode::ALL {
            t = mode_product(&t, self.bases[mode.axis()].as_ref(), mode)
                .expect("factor shapes are consistent by construction");
        }
        t
    }
}

pub fn hosvd(t: &Tensor3) -> Result<HosvdFactors> {
    let (u1, s1) = mode_basis(t, Mode::One)?;
    let (u2, s2) = mode_basis(t, Mode::Two)?;
    let (u3, s3) = mode_basis(t, Mode::Three)?;
    let mut core = mode_product(t, u1.adjoint().to_owned().as_ref(), Mode::One)?;
    core = mode_product(&core, u2.adjoint().to_owned().as_ref(), Mode::Two)?;
    core = mode_product(&core, u3.adjoint().to_owned().as_ref(), Mode::Three)?;
    Ok(HosvdFactors {
        core,
        bases: [u1, u2, u3],
        leading_singular_values: [s1, s2, s3],
    })
}

/// Hard-thresholds the HOSVD core and reconstructs.
///
/// `lambdas[n]` is a ratio: the absolute threshold for mode `n` is
/// `lambdas[n]` times the largest singular value of the mode-`n` unfolding.
/// A core entry is zeroed when its magnitude is strictly below any of the
/// three thresholds. All-zero ratios return the input unchanged.
pub fn hosvd_denoise(t: &Tensor3, lambdas: [f64; 3]) -> Result<Tensor3> {
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::invalid(format!(
            "threshold ratios must be finite and nonnegative, got {lambdas:?}"
        )));
    }
    if lambdas.iter().all(|&l| l == 0.0) {
        return Ok(t.clone());
    }
    let mut factors = hosvd(t)?;
    let threshold = lambdas
        .iter()
        .zip(factors.leading_singular_values)
        .map(|(l, s)| l * s)
        .fold(0.0_f64, f64::max);
    factors.zero_core_below(threshold);
    Ok(factors.reconstruct())
}

/// Hard-thresholds the HOSVD core against fixed magnitudes: an entry is
/// zeroed when it falls strictly below any of `thresholds`.
pub fn hosvd_denoise_absolute(t: &Tensor3, thresholds: [f64; 3]) -> Result<Tensor3> {
    if thresholds.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::invalid(format!(
            "thresholds must be finite and nonnegative, got {thresholds:?}"
        )));
    }
    let threshold = thresholds.iter().cloned().fold(0.0_f64, f64::max);
    if threshold == 0.0 {
        return Ok(t.clone());
    }
    let mut factors = hosvd(t)?;
    factors.zero_core_below(threshold);
    Ok(factors.reconstruct())
}
