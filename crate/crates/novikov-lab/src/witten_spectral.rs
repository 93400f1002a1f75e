//! The deformed de Rham complex `d_t = d + t omega ^` on flat tori, its
//! Laplacian `Delta_t = d_t^# d_t + d_t d_t^#`, spectra, the harmonic
//! oscillator model near a zero, and cutoff quasimodes.
//!
//! Forms are sampled on a uniform `N^n` grid (axis 0 fastest) with one
//! complex array per increasing multi-index, in lexicographic order. The
//! exterior derivative is Fourier differentiation, with the Nyquist mode
//! read as wavenumber `+N/2` so that only constants are closed 0-forms. Then
//! `d o d = 0` exactly and `d^#` is the exact adjoint of `d` for
//! the discrete L^2 product `sum conj(u) v (2 pi / N)^n`. The zero-order term
//! is pointwise, so `d_t o d_t = 0` holds to round-off on band-limited data
//! (where products with `omega` do not alias).

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_manifold::{torus_displacement, torus_distance, CriticalPoint, ModelManifold, TWO_PI};

type C = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("grid must have at least 8 nodes per axis, got {0}")]
    GridTooCoarse(usize),
    #[error("only the identity metric is supported")]
    NonFlatMetric,
    #[error("degree {q} is out of range for dimension {n}")]
    BadDegree { q: usize, n: usize },
    #[error("form shape mismatch: {0}")]
    Shape(String),
    #[error("requested {k} eigenvalues of a {dim}-dimensional operator")]
    TooManyEigenvalues { k: usize, dim: usize },
    #[error("eigensolver did not converge after {iterations} iterations (max residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("cutoff radius {eta:.4} must be below half the minimal distance {limit:.4} between zeros")]
    EtaTooLarge { eta: f64, limit: f64 },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("degree {q}: {found} eigenvalues below {threshold} at t = {t}, expected {expected}")]
    CountMismatch { q: usize, t: f64, expected: usize, found: usize, threshold: f64, report: Box<SpectrumReport> },
}

/// Binomial coefficient.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Increasing multi-indices of length `q` in `0..n`, lexicographic.
pub fn multi_indices(n: usize, q: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, q: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == q {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, q, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if q <= n {
        rec(0, n, q, &mut Vec::new(), &mut out);
    }
    out
}

fn wavenumber(j: usize, grid: usize) -> i64 {
    if j <= grid / 2 {
        j as i64
    } else {
        j as i64 - grid as i64
    }
}

/// A `q`-form sampled on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormField {
    pub n: usize,
    pub degree: usize,
    pub grid: usize,
    pub components: Vec<Vec<C>>,
}

impl FormField {
    pub fn zeros(n: usize, degree: usize, grid: usize) -> Self {
        let len = grid.pow(n as u32);
        FormField { n, degree, grid, components: vec![vec![C::new(0.0, 0.0); len]; binomial(n, degree)] }
    }

    pub fn node_count(&self) -> usize {
        self.grid.pow(self.n as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        (TWO_PI / self.grid as f64).powi(self.n as i32)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        node_coords(self.n, self.grid, idx)
    }

    /// Samples `f(theta)`, which returns one value per multi-index.
    pub fn from_fn<F: Fn(&[f64]) -> Vec<C> + Sync>(n: usize, degree: usize, grid: usize, f: F) -> Self {
        let mut out = Self::zeros(n, degree, grid);
        let vals: Vec<Vec<C>> = (0..out.node_count()).into_par_iter().map(|i| f(&node_coords(n, grid, i))).collect();
        for (i, v) in vals.iter().enumerate() {
            for (c, x) in out.components.iter_mut().zip(v) {
                c[i] = *x;
            }
        }
        out
    }

    /// Random form whose Fourier modes vanish outside `|k_a| <= band`.
    pub fn random_band_limited(n: usize, degree: usize, grid: usize, band: usize, rng: &mut impl Rng) -> Self {
        let mut out = Self::zeros(n, degree, grid);
        let ffts = FftSet::new(grid);
        let total = out.node_count();
        for comp in out.components.iter_mut() {
            for (idx, v) in comp.iter_mut().enumerate() {
                let inside = (0..n).all(|a| {
                    let j = (idx / grid.pow(a as u32)) % grid;
                    wavenumber(j, grid).unsigned_abs() as usize <= band && j != grid / 2
                });
                if inside {
                    *v = C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
            for a in 0..n {
                ffts.along_axis(comp, n, a, false, |_, _| {});
            }
            comp.iter_mut().for_each(|v| *v /= total as f64);
        }
        out
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), SpectralError> {
        if self.n != other.n || self.degree != other.degree || self.grid != other.grid {
            return Err(SpectralError::Shape(format!(
                "({}, {}, {}) vs ({}, {}, {})",
                self.n, self.degree, self.grid, other.n, other.degree, other.grid
            )));
        }
        Ok(())
    }

    /// Discrete L^2 product, conjugate-linear in `self`.
    pub fn inner(&self, other: &Self) -> C {
        let s: C = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<C>())
            .sum();
        s * self.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).re.max(0.0).sqrt()
    }

    pub fn scale(&mut self, a: C) {
        self.components.iter_mut().flatten().for_each(|v| *v *= a);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: C, other: &Self) {
        for (x, y) in self.components.iter_mut().flatten().zip(other.components.iter().flatten()) {
            *x += a * y;
        }
    }

    pub fn to_flat(&self) -> Vec<C> {
        self.components.concat()
    }

    pub fn from_flat(n: usize, degree: usize, grid: usize, flat: &[C]) -> Self {
        let len = grid.pow(n as u32);
        FormField { n, degree, grid, components: flat.chunks(len).map(|c| c.to_vec()).collect() }
    }

    /// Trigonometric interpolant for off-grid evaluation.
    pub fn interpolant(&self) -> TrigInterpolant {
        TrigInterpolant::new(self)
    }
}

fn node_coords(n: usize, grid: usize, mut idx: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let j = idx % grid;
            idx /= grid;
            TWO_PI * j as f64 / grid as f64
        })
        .collect()
}

/// Fourier coefficients of a form, evaluated at arbitrary points.
#[derive(Debug, Clone)]
pub struct TrigInterpolant {
    n: usize,
    grid: usize,
    coeffs: Vec<Vec<C>>,
}

impl TrigInterpolant {
    fn new(f: &FormField) -> Self {
        let ffts = FftSet::new(f.grid);
        let total = f.node_count() as f64;
        let coeffs = f
            .components
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for a in 0..f.n {
                    ffts.along_axis(&mut c, f.n, a, true, |_, _| {});
                }
                c.iter_mut().for_each(|v| *v /= total);
                c
            })
            .collect();
        TrigInterpolant { n: f.n, grid: f.grid, coeffs }
    }

    /// Component values at `p`; the Nyquist mode is read as a cosine.
    pub fn eval(&self, p: &[f64]) -> Vec<C> {
        let g = self.grid;
        let waves: Vec<Vec<C>> = p
            .iter()
            .map(|x| {
                let step = C::from_polar(1.0, *x);
                let mut w = vec![C::new(0.0, 0.0); g];
                let mut cur = C::new(1.0, 0.0);
                for j in 0..=g / 2 {
                    w[j] = cur;
                    if j > 0 && j < g - j {
                        w[g - j] = cur.conj();
                    }
                    // Re-anchor the recurrence to bound drift.
                    cur = if j % 16 == 15 { C::from_polar(1.0, (j + 1) as f64 * x) } else { cur * step };
                }
                if g % 2 == 0 {
                    w[g / 2] = C::new(w[g / 2].re, 0.0);
                }
                w
            })
            .collect();
        self.coeffs
            .iter()
            .map(|c| {
                let mut buf: Vec<C>;
                let mut src: &[C] = c;
                for axis in (0..self.n).rev() {
                    let stride = g.pow(axis as u32);
                    let mut next = vec![C::new(0.0, 0.0); stride];
                    for (j, w) in waves[axis].iter().enumerate() {
                        let row = &src[stride * j..stride * (j + 1)];
                        for (v, a) in next.iter_mut().zip(row) {
                            *v += a * w;
                        }
                    }
                    buf = next;
                    src = &buf;
                }
                src[0]
            })
            .collect()
    }
}

struct FftSet {
    grid: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftSet {
    fn new(grid: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftSet { grid, forward: planner.plan_fft_forward(grid), inverse: planner.plan_fft_inverse(grid) }
    }

    /// Transforms every line along `axis` (unnormalized), calling
    /// `between(j, &mut value)` on each Fourier mode before writing back.
    fn along_axis<F: Fn(usize, &mut C)>(&self, data: &mut [C], n: usize, axis: usize, forward: bool, between: F) {
        let g = self.grid;
        let stride = g.pow(axis as u32);
        let outer = g.pow((n - axis - 1) as u32);
        let plan = if forward { &self.forward } else { &self.inverse };
        let mut buf = vec![C::new(0.0, 0.0); g];
        for hi in 0..outer {
            for lo in 0..stride {
                let base = hi * stride * g + lo;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = data[base + j * stride];
                }
                plan.process(&mut buf);
                for (j, b) in buf.iter_mut().enumerate() {
                    between(j, b);
                }
                for (j, b) in buf.iter().enumerate() {
                    data[base + j * stride] = *b;
                }
            }
        }
    }

    /// Spectral derivative along `axis`.
    fn derivative(&self, u: &[C], n: usize, axis: usize) -> Vec<C> {
        let g = self.grid;
        let mut out = u.to_vec();
        self.along_axis(&mut out, n, axis, true, |j, v| {
            *v *= C::new(0.0, wavenumber(j, g) as f64 / g as f64);
        });
        let mut back = out;
        let plan = &self.inverse;
        let stride = g.pow(axis as u32);
        let outer = g.pow((n - axis - 1) as u32);
        let mut buf = vec![C::new(0.0, 0.0); g];
        for hi in 0..outer {
            for lo in 0..stride {
                let base = hi * stride * g + lo;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = back[base + j * stride];
                }
                plan.process(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    back[base + j * stride] = *b;
                }
            }
        }
        back
    }

    /// Applies the Fourier multiplier `1 / (|k|^2 + shift)`.
    fn inverse_shifted_laplacian(&self, u: &mut [C], n: usize, shift: f64) {
        let g = self.grid;
        for a in 0..n {
            self.along_axis(u, n, a, true, |_, _| {});
        }
        let total = g.pow(n as u32);
        for (idx, v) in u.iter_mut().enumerate() {
            let mut k2 = 0.0;
            let mut rem = idx;
            for _ in 0..n {
                let k = wavenumber(rem % g, g) as f64;
                k2 += k * k;
                rem /= g;
            }
            *v /= (k2 + shift) * total as f64;
        }
        for a in 0..n {
            self.along_axis(u, n, a, false, |_, _| {});
        }
    }
}

/// Grid, sampled one-form and FFT plans shared by the operators of a model.
pub struct Discretization {
    pub n: usize,
    pub grid: usize,
    /// `omega[i][node]`.
    pub omega: Vec<Vec<f64>>,
    /// `|omega|^2` at the nodes.
    pub omega_sq: Vec<f64>,
    ffts: FftSet,
    indices: Vec<Vec<Vec<usize>>>,
}

impl std::fmt::Debug for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discretization").field("n", &self.n).field("grid", &self.grid).finish()
    }
}

impl Discretization {
    pub fn new(m: &ModelManifold, grid: usize) -> Result<Self, SpectralError> {
        if grid < 8 {
            return Err(SpectralError::GridTooCoarse(grid));
        }
        if !m.has_identity_metric() {
            return Err(SpectralError::NonFlatMetric);
        }
        let n = m.dim();
        let total = grid.pow(n as u32);
        let samples: Vec<Vec<f64>> = (0..total).into_par_iter().map(|i| m.omega(&node_coords(n, grid, i))).collect();
        let omega: Vec<Vec<f64>> = (0..n).map(|a| samples.iter().map(|w| w[a]).collect()).collect();
        let omega_sq = samples.iter().map(|w| w.iter().map(|v| v * v).sum()).collect();
        Ok(Discretization {
            n,
            grid,
            omega,
            omega_sq,
            ffts: FftSet::new(grid),
            indices: (0..=n).map(|q| multi_indices(n, q)).collect(),
        })
    }

    pub fn dim(&self, q: usize) -> usize {
        binomial(self.n, q) * self.grid.pow(self.n as u32)
    }

    fn position(&self, q: usize, idx: &[usize]) -> usize {
        self.indices[q].iter().position(|v| v == idx).expect("valid multi-index")
    }

    fn check(&self, u: &FormField) -> Result<(), SpectralError> {
        if u.n != self.n || u.grid != self.grid || u.degree > self.n {
            return Err(SpectralError::Shape(format!("form ({}, {}) on a ({}, {}) grid", u.n, u.grid, self.n, self.grid)));
        }
        Ok(())
    }

    /// `d_t u`.
    pub fn d_t(&self, u: &FormField, t: f64) -> FormField {
        self.d_s(u, C::new(t, 0.0))
    }

    /// `d_s u = du + s omega ^ u` for complex `s`.
    pub fn d_s(&self, u: &FormField, s: C) -> FormField {
        let t = s;
        let q = u.degree;
        let mut out = FormField::zeros(self.n, (q + 1).min(self.n + 1), self.grid);
        if q >= self.n {
            out.components.clear();
            out.degree = q + 1;
            return out;
        }
        for (jpos, big) in self.indices[q + 1].iter().enumerate() {
            for (p, &axis) in big.iter().enumerate() {
                let small: Vec<usize> = big.iter().copied().filter(|&v| v != axis).collect();
                let src = &u.components[self.position(q, &small)];
                let du = self.ffts.derivative(src, self.n, axis);
                let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                let w = &self.omega[axis];
                for (i, o) in out.components[jpos].iter_mut().enumerate() {
                    *o += (du[i] + src[i] * (t * w[i])) * sign;
                }
            }
        }
        out
    }

    /// `d_t^# u`, the discrete adjoint of `d_t`.
    pub fn d_t_sharp(&self, u: &FormField, t: f64) -> FormField {
        let q = u.degree;
        if q == 0 {
            let mut z = FormField::zeros(self.n, 0, self.grid);
            z.components.clear();
            return z;
        }
        let mut out = FormField::zeros(self.n, q - 1, self.grid);
        for (ipos, small) in self.indices[q - 1].iter().enumerate() {
            for axis in (0..self.n).filter(|a| !small.contains(a)) {
                let mut big = small.clone();
                big.push(axis);
                big.sort_unstable();
                let p = big.iter().position(|&v| v == axis).expect("present");
                let src = &u.components[self.position(q, &big)];
                let du = self.ffts.derivative(src, self.n, axis);
                let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                let w = &self.omega[axis];
                for (i, o) in out.components[ipos].iter_mut().enumerate() {
                    *o += (-du[i] + src[i] * (t * w[i])) * sign;
                }
            }
        }
        out
    }

    /// `Delta_t u = d_t^# d_t u + d_t d_t^# u`.
    pub fn laplacian(&self, u: &FormField, t: f64) -> FormField {
        let q = u.degree;
        let mut out = FormField::zeros(self.n, q, self.grid);
        if q < self.n {
            let a = self.d_t_sharp(&self.d_t(u, t), t);
            out.axpy(C::new(1.0, 0.0), &a);
        }
        if q > 0 {
            let b = self.d_t(&self.d_t_sharp(u, t), t);
            out.axpy(C::new(1.0, 0.0), &b);
        }
        out
    }

    /// `(Delta_t - Delta_0 - t^2 |omega|^2) u / t`: the part of `Delta_t`
    /// linear in `t`, which is a zero-order operator.
    pub fn zero_order_part(&self, u: &FormField, t: f64) -> FormField {
        let mut out = self.laplacian(u, t);
        out.axpy(C::new(-1.0, 0.0), &self.laplacian(u, 0.0));
        for c in 0..out.components.len() {
            for (i, v) in out.components[c].iter_mut().enumerate() {
                *v -= u.components[c][i] * (t * t * self.omega_sq[i]);
            }
        }
        out.scale(C::new(1.0 / t, 0.0));
        out
    }

    fn precondition(&self, u: &mut [C], shift: f64) {
        let len = self.grid.pow(self.n as u32);
        for chunk in u.chunks_mut(len) {
            self.ffts.inverse_shifted_laplacian(chunk, self.n, shift);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    D,
    DSharp,
    Laplacian,
}

/// Matrix-free operator on forms of one degree.
#[derive(Debug, Clone)]
pub struct OperatorHandle {
    pub kind: OperatorKind,
    pub t: f64,
    pub degree: usize,
    pub disc: Arc<Discretization>,
}

impl OperatorHandle {
    pub fn apply(&self, u: &FormField) -> Result<FormField, SpectralError> {
        self.disc.check(u)?;
        if u.degree != self.degree {
            return Err(SpectralError::Shape(format!("operator on degree {} applied to degree {}", self.degree, u.degree)));
        }
        Ok(match self.kind {
            OperatorKind::D => self.disc.d_t(u, self.t),
            OperatorKind::DSharp => self.disc.d_t_sharp(u, self.t),
            OperatorKind::Laplacian => self.disc.laplacian(u, self.t),
        })
    }

    pub fn dim(&self) -> usize {
        self.disc.dim(self.degree)
    }

    fn apply_flat(&self, x: &[C]) -> Vec<C> {
        let d = &self.disc;
        let u = FormField::from_flat(d.n, self.degree, d.grid, x);
        let out = match self.kind {
            OperatorKind::D => d.d_t(&u, self.t),
            OperatorKind::DSharp => d.d_t_sharp(&u, self.t),
            OperatorKind::Laplacian => d.laplacian(&u, self.t),
        };
        out.to_flat()
    }
}

fn handle(m: &ModelManifold, kind: OperatorKind, q: usize, t: f64, grid: usize) -> Result<OperatorHandle, SpectralError> {
    if q > m.dim() {
        return Err(SpectralError::BadDegree { q, n: m.dim() });
    }
    Ok(OperatorHandle { kind, t, degree: q, disc: Arc::new(Discretization::new(m, grid)?) })
}

pub fn build_d_t(m: &ModelManifold, q: usize, t: f64, grid: usize) -> Result<OperatorHandle, SpectralError> {
    handle(m, OperatorKind::D, q, t, grid)
}

pub fn build_d_t_sharp(m: &ModelManifold, q: usize, t: f64, grid: usize) -> Result<OperatorHandle, SpectralError> {
    if q == 0 {
        return Err(SpectralError::BadDegree { q, n: m.dim() });
    }
    handle(m, OperatorKind::DSharp, q, t, grid)
}

pub fn build_delta_t(m: &ModelManifold, q: usize, t: f64, grid: usize) -> Result<OperatorHandle, SpectralError> {
    handle(m, OperatorKind::Laplacian, q, t, grid)
}

/// Eigensolver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenOptions {
    /// Target residual `|A v - lambda v|` for unit `v`.
    pub tol: f64,
    /// Iteration cap; `None` means `10 sqrt(dim)`, at least 200.
    pub max_iter: Option<usize>,
    pub seed: u64,
    /// Dimensions up to this use a dense Hermitian solver.
    pub dense_max: usize,
    /// Extra block vectors beyond the requested count.
    pub block_extra: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions { tol: 1e-8, max_iter: None, seed: 7, dense_max: 1200, block_extra: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub values: Vec<f64>,
    pub vectors: Vec<FormField>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub dense: bool,
}

fn dot(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn vnorm(a: &[C]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Orthonormalizes `cands` against `fixed` (assumed orthonormal) and each
/// other; nearly dependent candidates are dropped.
fn orthonormalize_against(fixed: &[&[C]], cands: Vec<Vec<C>>) -> Vec<Vec<C>> {
    let mut out: Vec<Vec<C>> = Vec::new();
    for mut v in cands {
        let n0 = vnorm(&v);
        if n0 == 0.0 || !n0.is_finite() {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n0);
        for _ in 0..2 {
            for f in fixed.iter().copied().chain(out.iter().map(|o| o.as_slice())) {
                let c = dot(f, &v);
                for (x, y) in v.iter_mut().zip(f) {
                    *x -= c * y;
                }
            }
        }
        let n1 = vnorm(&v);
        if n1 > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n1);
            out.push(v);
        }
    }
    out
}

fn hermitian_eigen(h: DMatrix<C>) -> (Vec<f64>, DMatrix<C>) {
    let h = (&h + h.adjoint()) * C::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn combine(cols: &[Vec<C>], coeffs: &DMatrix<C>, j: usize, rows: std::ops::Range<usize>) -> Vec<C> {
    let len = cols[0].len();
    let mut out = vec![C::new(0.0, 0.0); len];
    for i in rows {
        let c = coeffs[(i, j)];
        if c == C::new(0.0, 0.0) {
            continue;
        }
        for (o, x) in out.iter_mut().zip(&cols[i]) {
            *o += c * x;
        }
    }
    out
}

/// The `k` smallest eigenvalues of a Laplacian handle.
pub fn spectrum(op: &OperatorHandle, k: usize, opts: &EigenOptions) -> Result<EigenResult, SpectralError> {
    spectrum_deflated(op, k, &[], opts)
}

/// The `k` smallest eigenvalues on the orthogonal complement of `deflate`.
pub fn spectrum_deflated(
    op: &OperatorHandle,
    k: usize,
    deflate: &[FormField],
    opts: &EigenOptions,
) -> Result<EigenResult, SpectralError> {
    if op.kind != OperatorKind::Laplacian {
        return Err(SpectralError::BadInput("spectra are computed for Laplacian handles".into()));
    }
    let dim = op.dim();
    if k == 0 {
        return Ok(EigenResult { values: vec![], vectors: vec![], residuals: vec![], iterations: 0, dense: dim <= opts.dense_max });
    }
    if 10 * k > dim {
        return Err(SpectralError::TooManyEigenvalues { k, dim });
    }
    let defl = orthonormalize_against(&[], deflate.iter().map(|f| f.to_flat()).collect());
    let (values, vecs, iterations, dense) = if dim <= opts.dense_max {
        let (v, x) = dense_eigen(op, k, &defl);
        (v, x, 0, true)
    } else {
        let (v, x, it) = lobpcg(op, k, &defl, opts)?;
        (v, x, it, false)
    };
    let d = &op.disc;
    let residuals: Vec<f64> = vecs
        .par_iter()
        .zip(&values)
        .map(|(v, l)| {
            let av = apply_projected(op, &defl, v);
            let r: Vec<C> = av.iter().zip(v).map(|(a, x)| a - x * *l).collect();
            vnorm(&r) / vnorm(v)
        })
        .collect();
    let vectors = vecs
        .iter()
        .map(|v| {
            let mut f = FormField::from_flat(d.n, op.degree, d.grid, v);
            let nrm = f.norm();
            f.scale(C::new(1.0 / nrm, 0.0));
            f
        })
        .collect();
    Ok(EigenResult { values, vectors, residuals, iterations, dense })
}

/// `P A P x` with `P` the projector onto the complement of `defl`.
fn apply_projected(op: &OperatorHandle, defl: &[Vec<C>], x: &[C]) -> Vec<C> {
    let mut y = op.apply_flat(x);
    for _ in 0..2 {
        for f in defl {
            let c = dot(f, &y);
            for (a, b) in y.iter_mut().zip(f) {
                *a -= c * b;
            }
        }
    }
    y
}

fn dense_eigen(op: &OperatorHandle, k: usize, defl: &[Vec<C>]) -> (Vec<f64>, Vec<Vec<C>>) {
    let dim = op.dim();
    let cols: Vec<Vec<C>> = (0..dim)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![C::new(0.0, 0.0); dim];
            e[j] = C::new(1.0, 0.0);
            op.apply_flat(&e)
        })
        .collect();
    let mut h = DMatrix::from_fn(dim, dim, |r, c| cols[c][r]);
    if !defl.is_empty() {
        let q = DMatrix::from_fn(dim, defl.len(), |r, c| defl[c][r]);
        let p = DMatrix::<C>::identity(dim, dim) - &q * q.adjoint();
        let big = h.norm() * 10.0 + 1.0;
        h = &p * h * &p + &q * q.adjoint() * C::new(big, 0.0);
    }
    let (vals, vecs) = hermitian_eigen(h);
    let vectors = (0..k).map(|j| vecs.column(j).iter().copied().collect()).collect();
    (vals[..k].to_vec(), vectors)
}

fn lobpcg(op: &OperatorHandle, k: usize, defl: &[Vec<C>], opts: &EigenOptions) -> Result<(Vec<f64>, Vec<Vec<C>>, usize), SpectralError> {
    let dim = op.dim();
    let m = (k + opts.block_extra).min(dim - defl.len());
    let max_iter = opts.max_iter.unwrap_or_else(|| ((10.0 * (dim as f64).sqrt()) as usize).max(200));
    let shift = 1.0 + op.t * op.t * op.disc.omega_sq.iter().sum::<f64>() / op.disc.omega_sq.len().max(1) as f64;
    let apply_all = |xs: &[Vec<C>]| -> Vec<Vec<C>> { xs.par_iter().map(|x| apply_projected(op, defl, x)).collect() };
    let fixed_of = |x: &[Vec<C>]| -> Vec<Vec<C>> { defl.iter().chain(x.iter()).cloned().collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init: Vec<Vec<C>> =
        (0..m).map(|_| (0..dim).map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).collect();
    let defl_refs: Vec<&[C]> = defl.iter().map(|v| v.as_slice()).collect();
    let mut x = orthonormalize_against(&defl_refs, init);
    let mut ax = apply_all(&x);
    let (mut lambda, mut x_new, mut ax_new) = rayleigh_ritz(&x, &ax, m);
    x = std::mem::take(&mut x_new);
    ax = std::mem::take(&mut ax_new);
    let mut p: Vec<Vec<C>> = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut last_res = f64::INFINITY;
    for it in 1..=max_iter {
        let res: Vec<(Vec<C>, f64)> = (0..x.len())
            .map(|j| {
                let r: Vec<C> = ax[j].iter().zip(&x[j]).map(|(a, b)| a - b * lambda[j]).collect();
                let nr = vnorm(&r);
                (r, nr)
            })
            .collect();
        let worst = res.iter().take(k).map(|(_, n)| *n).fold(0.0, f64::max);
        last_res = worst;
        if worst <= opts.tol {
            return Ok((lambda[..k].to_vec(), x[..k].to_vec(), it));
        }
        if worst < best * 0.99 {
            best = worst;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 30 {
                p.clear();
                since_best = 0;
                best = worst;
            }
        }
        let w: Vec<Vec<C>> = res
            .into_par_iter()
            .filter(|(_, nr)| *nr > 0.1 * opts.tol)
            .map(|(mut r, _)| {
                op.disc.precondition(&mut r, shift);
                r
            })
            .collect();
        let fixed = fixed_of(&x);
        let fixed_refs: Vec<&[C]> = fixed.iter().map(|v| v.as_slice()).collect();
        let mut cands = w;
        cands.append(&mut p);
        let extra = orthonormalize_against(&fixed_refs, cands);
        let aextra = apply_all(&extra);
        let mut s = x.clone();
        s.extend(extra);
        let mut as_ = ax.clone();
        as_.extend(aextra);
        let (lam, coeffs) = ritz_coefficients(&s, &as_, m);
        let mx = x.len();
        let mut nx = Vec::with_capacity(m);
        let mut nax = Vec::with_capacity(m);
        let mut np = Vec::with_capacity(m);
        for j in 0..m {
            nx.push(combine(&s, &coeffs, j, 0..s.len()));
            nax.push(combine(&as_, &coeffs, j, 0..s.len()));
            if s.len() > mx {
                np.push(combine(&s, &coeffs, j, mx..s.len()));
            }
        }
        x = nx;
        ax = nax;
        p = np;
        lambda = lam;
        if it % 25 == 0 {
            // Re-orthonormalize and refresh A X to stop drift.
            let xo = orthonormalize_against(&defl_refs, x.clone());
            let axo = apply_all(&xo);
            let (l2, x2, ax2) = rayleigh_ritz(&xo, &axo, xo.len());
            x = x2;
            ax = ax2;
            lambda = l2;
            p.clear();
        }
    }
    Err(SpectralError::NotConverged { iterations: max_iter, residual: last_res })
}

fn ritz_coefficients(s: &[Vec<C>], as_: &[Vec<C>], m: usize) -> (Vec<f64>, DMatrix<C>) {
    let ns = s.len();
    let pairs: Vec<(usize, usize)> = (0..ns).flat_map(|i| (i..ns).map(move |j| (i, j))).collect();
    let vals: Vec<C> = pairs.par_iter().map(|&(i, j)| dot(&s[i], &as_[j])).collect();
    let mut h = DMatrix::zeros(ns, ns);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        h[(i, j)] = v;
        h[(j, i)] = v.conj();
    }
    let (lam, vecs) = hermitian_eigen(h);
    let m = m.min(ns);
    (lam[..m].to_vec(), vecs.columns(0, m).into_owned())
}

fn rayleigh_ritz(x: &[Vec<C>], ax: &[Vec<C>], m: usize) -> (Vec<f64>, Vec<Vec<C>>, Vec<Vec<C>>) {
    let (lam, c) = ritz_coefficients(x, ax, m);
    let nx = (0..lam.len()).map(|j| combine(x, &c, j, 0..x.len())).collect();
    let nax = (0..lam.len()).map(|j| combine(ax, &c, j, 0..x.len())).collect();
    (lam, nx, nax)
}

/// `max |Delta_(q+1) (d_t v) - lambda d_t v| / |d_t v|` over eigenpairs with
/// `lambda > min_lambda` and `d_t v` not negligible.
pub fn supersymmetry_residual(disc: &Discretization, t: f64, eig: &EigenResult, min_lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (v, l) in eig.vectors.iter().zip(&eig.values) {
        if *l <= min_lambda || v.degree >= disc.n {
            continue;
        }
        let dv = disc.d_t(v, t);
        let nd = dv.norm();
        if nd < 1e-6 * v.norm() {
            continue;
        }
        let mut r = disc.laplacian(&dv, t);
        r.axpy(C::new(-*l, 0.0), &dv);
        worst = worst.max(r.norm() / nd);
    }
    worst
}

/// The flat harmonic-oscillator model near a zero of index `k` with
/// Hessian eigenvalues `-2c` (k times) and `+2c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub n: usize,
    pub q: usize,
    pub k: usize,
    pub c: f64,
    pub t: f64,
}

/// Zero-order shift `-n + 2k - 2|I n {1..k}| + 2|I n {k+1..n}|` of the model.
pub fn epsilon_shift(n: usize, k: usize, multi_index: &[usize]) -> i64 {
    let inside = multi_index.iter().filter(|&&i| i < k).count() as i64;
    let outside = multi_index.len() as i64 - inside;
    -(n as i64) + 2 * k as i64 - 2 * inside + 2 * outside
}

fn quanta_vectors(n: usize, max_total: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for m in 0..=left {
            cur.push(m);
            rec(n, left - m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, max_total, &mut Vec::new(), &mut out);
    out
}

/// The `count` smallest eigenvalues of the local model, with multiplicity:
/// oscillator levels `2ct(2m_i + 1)` summed over axes plus `2ct * epsilon_I`.
pub fn local_model_spectrum(lm: &LocalModel, count: usize) -> Vec<f64> {
    let unit = 2.0 * lm.c * lm.t;
    let mut vals: Vec<f64> = Vec::new();
    for idx in multi_indices(lm.n, lm.q) {
        let eps = epsilon_shift(lm.n, lm.k, &idx);
        for quanta in quanta_vectors(lm.n, count) {
            let osc: usize = quanta.iter().map(|m| 2 * m + 1).sum();
            vals.push(unit * (osc as i64 + eps) as f64);
        }
    }
    vals.sort_by(f64::total_cmp);
    vals.truncate(count);
    vals
}

/// Local levels for arbitrary Hessian eigenvalues `lambdas` (identity
/// metric): `sum_i 2 |lambda_i| t (m_i + [i unstable, not in I] + [i stable, in I])`.
pub fn local_levels(lambdas: &[f64], q: usize, t: f64, count: usize) -> Vec<f64> {
    let n = lambdas.len();
    let mut vals = Vec::new();
    for idx in multi_indices(n, q) {
        for quanta in quanta_vectors(n, count) {
            let v: f64 = (0..n)
                .map(|i| {
                    let inside = idx.contains(&i);
                    let bump = if lambdas[i] < 0.0 { usize::from(!inside) } else { usize::from(inside) };
                    2.0 * lambdas[i].abs() * t * (quanta[i] + bump) as f64
                })
                .sum();
            vals.push(v);
        }
    }
    vals.sort_by(f64::total_cmp);
    vals.truncate(count);
    vals
}

/// Unit-norm kernel generator `(2ct/pi)^(n/4) exp(-ct |x|^2)` of the model in degree `q = k`.
pub fn local_kernel_profile(lm: &LocalModel, x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (2.0 * lm.c * lm.t / std::f64::consts::PI).powf(lm.n as f64 / 4.0) * (-lm.c * lm.t * r2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuasimodeProfile {
    /// Gaussian in the Hessian eigenframe.
    Gaussian,
    /// `exp(-t sum_i |h_i(y_i + x_i) - h_i(y_i)|)` for separable models, or
    /// `exp(-t |h(y + x) - h(y)|)` at minima and maxima; the Gaussian elsewhere.
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuasimodeOptions {
    /// Cutoff radius; defaults to 0.45 times the minimal distance between zeros.
    pub eta: Option<f64>,
    pub profile: QuasimodeProfile,
    /// Form degree; defaults to the index of the zero.
    pub degree: Option<usize>,
}

impl Default for QuasimodeOptions {
    fn default() -> Self {
        QuasimodeOptions { eta: None, profile: QuasimodeProfile::Adapted, degree: None }
    }
}

/// Minimal torus distance between distinct zeros (pi when there is one zero).
pub fn min_zero_distance(points: &[CriticalPoint]) -> f64 {
    let mut d = std::f64::consts::PI * 2.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.min(torus_distance(&a.position, &b.position));
        }
    }
    d
}

pub fn default_eta(points: &[CriticalPoint]) -> f64 {
    (0.45 * min_zero_distance(points)).min(0.9 * std::f64::consts::PI)
}

/// Smooth cutoff: 1 on `[0, eta/2]`, 0 on `[eta, inf)`.
pub fn cutoff(u: f64, eta: f64) -> f64 {
    let s = (u - 0.5 * eta) / (0.5 * eta);
    if s <= 0.0 {
        return 1.0;
    }
    if s >= 1.0 {
        return 0.0;
    }
    let f = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    f(1.0 - s) / (f(1.0 - s) + f(s))
}

fn axis_primitive(m: &ModelManifold, axis: usize, theta: f64) -> f64 {
    let mut v = m.periods()[axis] * theta;
    for term in m.terms() {
        if term.freq.iter().enumerate().all(|(i, k)| i == axis || *k == 0) && term.freq[axis] != 0 {
            v += term.amplitude * (term.freq[axis] as f64 * theta + term.phase).cos();
        }
    }
    v
}

/// Cutoff quasimode at `y`, normalized to unit discrete L^2 norm.
pub fn build_quasimode(
    m: &ModelManifold,
    points: &[CriticalPoint],
    y: &CriticalPoint,
    t: f64,
    grid: usize,
    opts: &QuasimodeOptions,
) -> Result<FormField, SpectralError> {
    let n = m.dim();
    let limit = 0.5 * min_zero_distance(points);
    let eta = opts.eta.unwrap_or_else(|| default_eta(points));
    if eta >= limit || eta <= 0.0 {
        return Err(SpectralError::EtaTooLarge { eta, limit });
    }
    let q = opts.degree.unwrap_or(y.index);
    if q > n {
        return Err(SpectralError::BadDegree { q, n });
    }
    let idxs = multi_indices(n, q);
    let adapted = opts.profile == QuasimodeProfile::Adapted && q == y.index;
    let separable = m.is_separable() && (0..n).all(|i| (0..n).all(|j| i == j || y.hessian[i][j].abs() < 1e-12));
    let whole = adapted && (y.index == 0 || y.index == n);
    let per_axis = adapted && !whole && separable;
    // Coefficients of the constant q-vector part.
    let coeffs: Vec<f64> = if per_axis {
        let unstable: Vec<usize> = (0..n).filter(|&i| y.hessian[i][i] < 0.0).collect();
        idxs.iter().map(|ix| if *ix == unstable { 1.0 } else { 0.0 }).collect()
    } else {
        let ev = &y.eigenvectors;
        idxs.iter()
            .map(|ix| {
                let mat = DMatrix::from_fn(q, q, |r, c| ev[c][ix[r]]);
                if q == 0 {
                    1.0
                } else {
                    mat.determinant()
                }
            })
            .collect()
    };
    let h_y = y.h_value;
    let form = FormField::from_fn(n, q, grid, |p| {
        let x = torus_displacement(&y.position, p);
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cut = cutoff(r, eta);
        if cut == 0.0 {
            return vec![C::new(0.0, 0.0); idxs.len()];
        }
        let exponent = if whole {
            let lifted: Vec<f64> = y.position.iter().zip(&x).map(|(a, b)| a + b).collect();
            (m.h_lift(&lifted) - h_y).abs()
        } else if per_axis {
            (0..n)
                .map(|i| (axis_primitive(m, i, y.position[i] + x[i]) - axis_primitive(m, i, y.position[i])).abs())
                .sum()
        } else {
            (0..n)
                .map(|j| {
                    let proj: f64 = (0..n).map(|i| y.eigenvectors[j][i] * x[i]).sum();
                    0.5 * y.eigenvalues[j].abs() * proj * proj
                })
                .sum()
        };
        let amp = cut * (-t * exponent).exp();
        coeffs.iter().map(|c| C::new(c * amp, 0.0)).collect()
    });
    let nrm = form.norm();
    if nrm == 0.0 || !nrm.is_finite() {
        return Err(SpectralError::BadInput("quasimode vanishes on the grid".into()));
    }
    let mut form = form;
    form.scale(C::new(1.0 / nrm, 0.0));
    Ok(form)
}

/// Rayleigh quotient `<Delta u, u> / <u, u>`.
pub fn rayleigh_quotient(disc: &Discretization, u: &FormField, t: f64) -> f64 {
    disc.laplacian(u, t).inner(u).re / u.inner(u).re
}

/// Mini-max separation: `a` is the largest Rayleigh quotient on the
/// quasimode span, `b` the smallest on its orthogonal complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniMaxCheck {
    pub q: usize,
    pub t: f64,
    pub span_dim: usize,
    pub a: f64,
    pub b: f64,
    pub pass: bool,
}

pub fn minimax_check(
    m: &ModelManifold,
    points: &[CriticalPoint],
    q: usize,
    t: f64,
    grid: usize,
    qopts: &QuasimodeOptions,
    eopts: &EigenOptions,
) -> Result<MiniMaxCheck, SpectralError> {
    let op = build_delta_t(m, q, t, grid)?;
    let d = &op.disc;
    let modes: Vec<FormField> = points
        .iter()
        .filter(|c| c.index == q)
        .map(|c| build_quasimode(m, points, c, t, grid, &QuasimodeOptions { degree: Some(q), ..*qopts }))
        .collect::<Result<_, _>>()?;
    let flat = orthonormalize_against(&[], modes.iter().map(|f| f.to_flat()).collect());
    let basis: Vec<FormField> = flat.iter().map(|v| FormField::from_flat(d.n, q, d.grid, v)).collect();
    let a = if basis.is_empty() {
        0.0
    } else {
        let lb: Vec<FormField> = basis.par_iter().map(|b| d.laplacian(b, t)).collect();
        let h = DMatrix::from_fn(basis.len(), basis.len(), |r, c| basis[r].inner(&lb[c]) / basis[r].cell_volume());
        hermitian_eigen(h).0.last().copied().unwrap_or(0.0)
    };
    let rest = spectrum_deflated(&op, 1, &basis, eopts)?;
    let b = rest.values[0];
    Ok(MiniMaxCheck { q, t, span_dim: basis.len(), a, b, pass: a < b })
}

/// Spectrum of `Delta^q_t` at one `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub t: f64,
    pub q: usize,
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub small_count: usize,
    /// Largest eigenvalue below the threshold.
    pub gap_lower: Option<f64>,
    /// Smallest eigenvalue above the threshold.
    pub gap_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub q: usize,
    pub grid: usize,
    pub threshold: f64,
    /// Number of zeros of index `q`.
    pub expected_small: usize,
    pub entries: Vec<SpectrumEntry>,
    /// Slope of `log(gap_lower)` against `t`; `None` when all small
    /// eigenvalues sit below the round-off floor.
    pub small_log_slope: Option<f64>,
    pub small_below_floor: bool,
    pub large_slope: f64,
    pub large_intercept: f64,
    /// Largest relative deviation of `gap_upper` from its linear fit.
    pub large_max_rel_dev: f64,
    pub gap_lower_decreasing: bool,
    pub gap_upper_increasing: bool,
    pub minimax: Option<MiniMaxCheck>,
}

impl SpectrumReport {
    /// Rows `(t, q, idx, lambda)` sorted by `(q, t, idx)`.
    pub fn flat_rows(&self) -> Vec<(f64, usize, usize, f64)> {
        let mut rows: Vec<(f64, usize, usize, f64)> = self
            .entries
            .iter()
            .flat_map(|e| e.eigenvalues.iter().enumerate().map(move |(i, l)| (e.t, e.q, i, *l)))
            .collect();
        rows.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.total_cmp(&b.0)).then(a.2.cmp(&b.2)));
        rows
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("t\tq\tidx\tlambda\n");
        for (t, q, i, l) in self.flat_rows() {
            out.push_str(&format!("{t}\t{q}\t{i}\t{l:.12e}\n"));
        }
        out
    }
}

/// Least-squares line `y = a + b x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapOptions {
    /// Eigenvalues computed beyond the expected small count.
    pub extra: usize,
    pub threshold: f64,
    /// Small eigenvalues below `floor_rel * gap_upper` count as round-off.
    pub floor_rel: f64,
    pub eigen: EigenOptions,
    /// Run the mini-max check at the largest `t`.
    pub minimax: bool,
    pub quasimode: QuasimodeOptions,
}

impl Default for GapOptions {
    fn default() -> Self {
        GapOptions {
            extra: 2,
            threshold: 1.0,
            floor_rel: 1e-8,
            eigen: EigenOptions::default(),
            minimax: true,
            quasimode: QuasimodeOptions::default(),
        }
    }
}

/// Spectra of `Delta^q_t` over `t_grid`, small counts, gap endpoints and fits.
pub fn verify_gap(
    m: &ModelManifold,
    points: &[CriticalPoint],
    q: usize,
    t_grid: &[f64],
    grid: usize,
    opts: &GapOptions,
) -> Result<SpectrumReport, SpectralError> {
    if t_grid.len() < 4 || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpectralError::BadInput("t_grid must be increasing with at least 4 points".into()));
    }
    let expected = points.iter().filter(|c| c.index == q).count();
    let k = expected + opts.extra.max(1);
    let mut entries = Vec::new();
    for &t in t_grid {
        let op = build_delta_t(m, q, t, grid)?;
        let eig = spectrum(&op, k, &opts.eigen)?;
        let small: Vec<f64> = eig.values.iter().copied().filter(|l| *l < opts.threshold).collect();
        entries.push(SpectrumEntry {
            t,
            q,
            small_count: small.len(),
            gap_lower: small.last().copied(),
            gap_upper: eig.values.iter().copied().find(|l| *l >= opts.threshold),
            eigenvalues: eig.values,
            residuals: eig.residuals,
        });
    }
    let ts: Vec<f64> = entries.iter().map(|e| e.t).collect();
    let uppers: Vec<f64> = entries.iter().map(|e| e.gap_upper.unwrap_or(f64::NAN)).collect();
    let (large_intercept, large_slope) = linear_fit(&ts, &uppers);
    let large_max_rel_dev = ts
        .iter()
        .zip(&uppers)
        .map(|(t, u)| ((large_intercept + large_slope * t) - u).abs() / u.abs())
        .fold(0.0, f64::max);
    let lows: Vec<(f64, f64)> = entries
        .iter()
        .filter_map(|e| match (e.gap_lower, e.gap_upper) {
            (Some(l), Some(u)) if l > opts.floor_rel * u => Some((e.t, l)),
            _ => None,
        })
        .collect();
    let any_small = entries.iter().any(|e| e.gap_lower.is_some());
    let small_log_slope = if lows.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = lows.iter().map(|(t, l)| (*t, l.ln())).unzip();
        Some(linear_fit(&xs, &ys).1)
    } else {
        None
    };
    let small_below_floor = any_small && lows.is_empty();
    let gap_lower_decreasing = lows.windows(2).all(|w| w[1].1 < w[0].1);
    let gap_upper_increasing = uppers.windows(2).all(|w| w[1] > w[0]);
    let mut report = SpectrumReport {
        q,
        grid,
        threshold: opts.threshold,
        expected_small: expected,
        entries,
        small_log_slope,
        small_below_floor,
        large_slope,
        large_intercept,
        large_max_rel_dev,
        gap_lower_decreasing,
        gap_upper_increasing,
        minimax: None,
    };
    let last = report.entries.last().expect("nonempty grid");
    if last.small_count != expected {
        return Err(SpectralError::CountMismatch {
            q,
            t: last.t,
            expected,
            found: last.small_count,
            threshold: opts.threshold,
            report: Box::new(report),
        });
    }
    if opts.minimax && expected > 0 {
        let t = *t_grid.last().expect("nonempty");
        report.minimax = Some(minimax_check(m, points, q, t, grid, &opts.quasimode, &opts.eigen)?);
    }
    Ok(report)
}
