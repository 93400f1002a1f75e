//! Flat tori `T^n = R^n / (2 pi Z)^n` carrying a closed one-form
//! `omega = sum_i kappa_i dtheta_i + dF`, where `F` is a finite sum of
//! `amplitude * cos(freq . theta + phase)`, and a constant metric.
//!
//! The universal cover is `R^n` with primitive
//! `h(x) = kappa . x + F(x) - h(base)`, so a deck shift by `2 pi e_i` raises
//! `h` by `2 pi kappa_i`. Deck vectors live in `Z^n`; the period lattice
//! keeps only the axes with `kappa_i != 0`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::novikov_ring::{Lattice, RingError};

pub const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("invalid manifold: {0}")]
    Invalid(String),
    #[error("metric is not symmetric positive definite (min eigenvalue {0:.3e})")]
    BadMetric(f64),
    #[error("periods are not rationally independent: {0}")]
    Periods(#[from] RingError),
    #[error("degenerate zero of omega near {position:?} (|det hessian| = {det:.3e}); omega is not Morse")]
    DegenerateZero { position: Vec<f64>, det: f64 },
    #[error("point {position:?} is not a zero of omega (|omega| = {norm:.3e})")]
    NotAZero { position: Vec<f64>, norm: f64 },
    #[error("grid_per_axis must be at least 8, got {0}")]
    GridTooCoarse(usize),
}

/// `amplitude * cos(freq . theta + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub freq: Vec<i64>,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

impl TrigTerm {
    pub fn new(freq: Vec<i64>, amplitude: f64, phase: f64) -> Self {
        TrigTerm { freq, amplitude, phase }
    }

    fn arg(&self, x: &[f64]) -> f64 {
        self.freq.iter().zip(x).map(|(k, t)| *k as f64 * t).sum::<f64>() + self.phase
    }
}

/// Text description of a model, as found in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub dim: usize,
    pub periods: Vec<f64>,
    /// Row-major constant metric; identity when omitted.
    #[serde(default)]
    pub metric: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

/// Tolerances for zero finding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroOptions {
    pub dedupe: f64,
    pub newton_tol: f64,
    pub degeneracy_tol: f64,
    pub max_newton_iter: usize,
}

impl Default for ZeroOptions {
    fn default() -> Self {
        ZeroOptions { dedupe: 1e-6, newton_tol: 1e-10, degeneracy_tol: 1e-8, max_newton_iter: 60 }
    }
}

/// A nondegenerate zero of `omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    /// Position in the sorted list returned by [`ModelManifold::find_zeros`].
    pub id: usize,
    /// Coordinates in `[0, 2 pi)^n`.
    pub position: Vec<f64>,
    pub index: usize,
    /// Coordinate Hessian of the local primitive, row-major.
    pub hessian: Vec<Vec<f64>>,
    /// Eigenvalues of the Hessian relative to the metric, ascending.
    pub eigenvalues: Vec<f64>,
    /// Metric-orthonormal eigenvectors matching `eigenvalues`; the first
    /// `index` of them are the unstable frame. Each is sign-normalized so its
    /// first entry above 1e-12 in modulus is positive.
    pub eigenvectors: Vec<Vec<f64>>,
    /// Geometric mean of `|eigenvalue| / 2`.
    pub local_scale: f64,
    /// `h` at `position`.
    pub h_value: f64,
}

impl CriticalPoint {
    pub fn unstable_frame(&self) -> &[Vec<f64>] {
        &self.eigenvectors[..self.index]
    }

    pub fn stable_frame(&self) -> &[Vec<f64>] {
        &self.eigenvectors[self.index..]
    }

    /// Smallest `|eigenvalue|`.
    pub fn min_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min)
    }
}

/// A lift of a critical point to the cover: `position + 2 pi * deck`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedCriticalPoint {
    pub id: usize,
    pub deck: Vec<i64>,
    pub h_value: f64,
}

#[derive(Debug, Clone)]
pub struct ModelManifold {
    spec: ManifoldSpec,
    metric: DMatrix<f64>,
    metric_inv: DMatrix<f64>,
    /// Lower Cholesky factor of the metric.
    chol: DMatrix<f64>,
    base: Vec<f64>,
    h_base: f64,
    lattice: Lattice,
    /// Axes with nonzero period, in order; these index the lattice.
    lattice_axes: Vec<usize>,
    identity_metric: bool,
}

impl ModelManifold {
    pub fn new(spec: ManifoldSpec) -> Result<Self, ManifoldError> {
        let n = spec.dim;
        if n == 0 {
            return Err(ManifoldError::Invalid("dim must be at least 1".into()));
        }
        if spec.periods.len() != n {
            return Err(ManifoldError::Invalid(format!("{} periods for dim {n}", spec.periods.len())));
        }
        if spec.periods.iter().any(|p| !p.is_finite()) {
            return Err(ManifoldError::Invalid("periods must be finite".into()));
        }
        for t in &spec.terms {
            if t.freq.len() != n {
                return Err(ManifoldError::Invalid(format!("term frequency {:?} has wrong length", t.freq)));
            }
            if !t.amplitude.is_finite() || !t.phase.is_finite() {
                return Err(ManifoldError::Invalid("term amplitude and phase must be finite".into()));
            }
        }
        let metric = match &spec.metric {
            None => DMatrix::identity(n, n),
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(ManifoldError::Invalid("metric must be dim x dim".into()));
                }
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
        };
        if (&metric - metric.transpose()).amax() > 1e-12 {
            return Err(ManifoldError::BadMetric(f64::NAN));
        }
        let min_eig = SymmetricEigen::new(metric.clone()).eigenvalues.min();
        if !(min_eig > 1e-10) {
            return Err(ManifoldError::BadMetric(min_eig));
        }
        let chol = metric.clone().cholesky().ok_or(ManifoldError::BadMetric(min_eig))?.l();
        let metric_inv = metric.clone().try_inverse().ok_or(ManifoldError::BadMetric(min_eig))?;
        let lattice_axes: Vec<usize> = (0..n).filter(|&i| spec.periods[i] != 0.0).collect();
        let lattice_periods: Vec<f64> = lattice_axes.iter().map(|&i| TWO_PI * spec.periods[i].abs()).collect();
        let lattice = Lattice::new(lattice_periods)?;
        check_rational_independence(&lattice)?;
        let identity_metric = (&metric - DMatrix::identity(n, n)).amax() == 0.0;
        let mut m = ModelManifold {
            spec,
            metric,
            metric_inv,
            chol,
            base: vec![0.0; n],
            h_base: 0.0,
            lattice,
            lattice_axes,
            identity_metric,
        };
        m.h_base = m.h_raw(&m.base.clone());
        Ok(m)
    }

    /// Moves the normalization point of `h`.
    pub fn with_base_point(mut self, base: Vec<f64>) -> Result<Self, ManifoldError> {
        if base.len() != self.dim() {
            return Err(ManifoldError::Invalid("base point has wrong length".into()));
        }
        self.h_base = self.h_raw(&base);
        self.base = base;
        Ok(self)
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn periods(&self) -> &[f64] {
        &self.spec.periods
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.spec.terms
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    pub fn metric_inverse(&self) -> &DMatrix<f64> {
        &self.metric_inv
    }

    pub fn has_identity_metric(&self) -> bool {
        self.identity_metric
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn lattice_axes(&self) -> &[usize] {
        &self.lattice_axes
    }

    /// True when every term depends on a single coordinate and the metric is
    /// the identity, so `h` splits into one-variable pieces.
    pub fn is_separable(&self) -> bool {
        self.identity_metric && self.spec.terms.iter().all(|t| t.freq.iter().filter(|k| **k != 0).count() <= 1)
    }

    /// Stable hash of the spec, used as a cache key.
    pub fn content_hash(&self) -> String {
        let text = serde_json::to_string(&self.spec).expect("spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Lattice point of a deck vector, with the action `2 pi kappa . deck`.
    pub fn deck_to_lattice(&self, deck: &[i64]) -> Vec<i64> {
        self.lattice_axes
            .iter()
            .map(|&i| if self.spec.periods[i] > 0.0 { deck[i] } else { -deck[i] })
            .collect()
    }

    pub fn deck_action(&self, deck: &[i64]) -> f64 {
        deck.iter().zip(&self.spec.periods).map(|(d, k)| TWO_PI * k * *d as f64).sum()
    }

    pub fn f_value(&self, x: &[f64]) -> f64 {
        self.spec.terms.iter().map(|t| t.amplitude * t.arg(x).cos()).sum()
    }

    fn h_raw(&self, x: &[f64]) -> f64 {
        self.spec.periods.iter().zip(x).map(|(k, t)| k * t).sum::<f64>() + self.f_value(x)
    }

    /// Primitive of `omega` on the cover, zero at the base point.
    pub fn h_lift(&self, x: &[f64]) -> f64 {
        self.h_raw(x) - self.h_base
    }

    /// Components `omega_i(x) = kappa_i + dF/dx_i`.
    pub fn omega(&self, x: &[f64]) -> Vec<f64> {
        let mut w = self.spec.periods.clone();
        self.add_df(x, &mut w);
        w
    }

    fn add_df(&self, x: &[f64], out: &mut [f64]) {
        for t in &self.spec.terms {
            let s = t.amplitude * t.arg(x).sin();
            for (o, k) in out.iter_mut().zip(&t.freq) {
                *o -= s * *k as f64;
            }
        }
    }

    /// Second derivatives of `F` (equivalently of `h`).
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for t in &self.spec.terms {
            let c = t.amplitude * t.arg(x).cos();
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] -= c * (t.freq[i] * t.freq[j]) as f64;
                }
            }
        }
        h
    }

    /// `X = -grad_g omega`, written into `out`.
    pub fn flow_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out.copy_from_slice(&self.spec.periods);
        self.add_df(x, out);
        if self.identity_metric {
            for o in out.iter_mut() {
                *o = -*o;
            }
        } else {
            let w = DVector::from_column_slice(out);
            let v = -(&self.metric_inv * w);
            out[..n].copy_from_slice(v.as_slice());
        }
    }

    pub fn flow(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.flow_into(x, &mut out);
        out
    }

    /// `|omega|_g^2`.
    pub fn omega_norm_sq(&self, x: &[f64]) -> f64 {
        let w = DVector::from_vec(self.omega(x));
        (w.transpose() * &self.metric_inv * &w)[(0, 0)]
    }

    /// Index and Hessian at a zero of `omega`.
    pub fn hessian_index(&self, x: &[f64], opts: &ZeroOptions) -> Result<(usize, DMatrix<f64>), ManifoldError> {
        let norm = self.omega(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= opts.newton_tol.max(1e-9) {
            return Err(ManifoldError::NotAZero { position: x.to_vec(), norm });
        }
        let h = self.hessian(x);
        let (vals, _) = self.metric_eigen(&h);
        let det: f64 = vals.iter().product();
        if vals.iter().any(|v| v.abs() <= opts.degeneracy_tol) || det.abs() <= opts.degeneracy_tol {
            return Err(ManifoldError::DegenerateZero { position: x.to_vec(), det: det.abs() });
        }
        Ok((vals.iter().filter(|v| **v < 0.0).count(), h))
    }

    /// Eigenpairs of `h` relative to the metric, ascending, metric-orthonormal.
    fn metric_eigen(&self, h: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.dim();
        let linv = self.chol.clone().try_inverse().expect("cholesky factor invertible");
        let sym = &linv * h * linv.transpose();
        let sym = (&sym + sym.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
        let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = order
            .iter()
            .map(|&i| {
                let w = eig.eigenvectors.column(i).into_owned();
                let v = linv.transpose() * w;
                let mut v: Vec<f64> = v.iter().cloned().collect();
                let lead = v.iter().find(|c| c.abs() > 1e-12).cloned().unwrap_or(1.0);
                if lead < 0.0 {
                    v.iter_mut().for_each(|c| *c = -*c);
                }
                v
            })
            .collect();
        (vals, vecs)
    }

    fn newton(&self, seed: &[f64], opts: &ZeroOptions) -> Option<Vec<f64>> {
        let n = self.dim();
        let mut x = seed.to_vec();
        for _ in 0..opts.max_newton_iter {
            let w = DVector::from_vec(self.omega(&x));
            let norm = w.norm();
            if norm < opts.newton_tol * 1e-2 {
                break;
            }
            let h = self.hessian(&x);
            let svd = h.svd(true, true);
            let smax = svd.singular_values.max();
            let step = svd.solve(&w, (smax * 1e-12).max(1e-300)).ok()?;
            let mut scale = 1.0;
            let len = step.norm();
            if len > 0.5 {
                scale = 0.5 / len;
            }
            for i in 0..n {
                x[i] -= scale * step[i];
            }
            if x.iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
        let norm = self.omega(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
        (norm < opts.newton_tol).then_some(x)
    }

    /// All zeros of `omega`, from Newton iterations seeded at every cell
    /// center of a `grid_per_axis^n` grid. Sorted lexicographically.
    pub fn find_zeros(&self, grid_per_axis: usize, opts: &ZeroOptions) -> Result<Vec<CriticalPoint>, ManifoldError> {
        if grid_per_axis < 8 {
            return Err(ManifoldError::GridTooCoarse(grid_per_axis));
        }
        let n = self.dim();
        let total = grid_per_axis.pow(n as u32);
        let h = TWO_PI / grid_per_axis as f64;
        let found: Vec<Option<Vec<f64>>> = (0..total)
            .into_par_iter()
            .map(|k| {
                let mut rem = k;
                let seed: Vec<f64> = (0..n)
                    .map(|_| {
                        let i = rem % grid_per_axis;
                        rem /= grid_per_axis;
                        (i as f64 + 0.5) * h
                    })
                    .collect();
                self.newton(&seed, opts).map(|x| wrap_point(&x))
            })
            .collect();
        let mut unique: Vec<Vec<f64>> = Vec::new();
        for x in found.into_iter().flatten() {
            if !unique.iter().any(|u| torus_distance(u, &x) < opts.dedupe) {
                unique.push(x);
            }
        }
        unique.sort_by(|a, b| {
            a.iter().zip(b).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut out = Vec::with_capacity(unique.len());
        for (id, x) in unique.into_iter().enumerate() {
            out.push(self.critical_point_at(id, x, opts)?);
        }
        Ok(out)
    }

    /// Builds the critical-point record at a known zero.
    pub fn critical_point_at(&self, id: usize, x: Vec<f64>, opts: &ZeroOptions) -> Result<CriticalPoint, ManifoldError> {
        let (index, hess) = self.hessian_index(&x, opts)?;
        let (eigenvalues, eigenvectors) = self.metric_eigen(&hess);
        let n = self.dim() as f64;
        let local_scale = (eigenvalues.iter().map(|e| (e.abs() / 2.0).ln()).sum::<f64>() / n).exp();
        let hessian = (0..self.dim()).map(|i| hess.row(i).iter().cloned().collect()).collect();
        Ok(CriticalPoint {
            id,
            h_value: self.h_lift(&x),
            position: x,
            index,
            hessian,
            eigenvalues,
            eigenvectors,
            local_scale,
        })
    }

    /// Deck vector placing the lift of `cp` at an `h` value in `[0, P)`,
    /// where `P` is the first lattice period. Zero for exact forms.
    pub fn section_deck(&self, cp: &CriticalPoint) -> Vec<i64> {
        let mut deck = vec![0i64; self.dim()];
        if let Some(&axis) = self.lattice_axes.first() {
            let step = TWO_PI * self.spec.periods[axis];
            let m = (cp.h_value / step.abs()).floor() as i64;
            deck[axis] = if step > 0.0 { -m } else { m };
        }
        deck
    }

    pub fn lift_position(&self, cp: &CriticalPoint, deck: &[i64]) -> Vec<f64> {
        cp.position.iter().zip(deck).map(|(p, d)| p + TWO_PI * *d as f64).collect()
    }

    pub fn lift(&self, cp: &CriticalPoint, deck: Vec<i64>) -> LiftedCriticalPoint {
        let h_value = cp.h_value + self.deck_action(&deck);
        LiftedCriticalPoint { id: cp.id, deck, h_value }
    }

    /// Euler characteristic `sum_q (-1)^q #Cr_q`.
    pub fn euler_characteristic(points: &[CriticalPoint]) -> i64 {
        points.iter().map(|c| if c.index % 2 == 0 { 1 } else { -1 }).sum()
    }
}

/// Reduces coordinates to `[0, 2 pi)`, snapping values within 1e-9 of `2 pi` to 0.
pub fn wrap_point(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let w = v.rem_euclid(TWO_PI);
            if TWO_PI - w < 1e-9 || w.abs() < 1e-14 {
                0.0
            } else {
                w
            }
        })
        .collect()
}

/// Componentwise minimal-image displacement `b - a` on the torus.
pub fn torus_displacement(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| (q - p + PI).rem_euclid(TWO_PI) - PI).collect()
}

pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    torus_displacement(a, b).iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Rejects lattices where small lattice points share an action, the float
/// stand-in for rational dependence of the periods.
fn check_rational_independence(lattice: &Lattice) -> Result<(), RingError> {
    let r = lattice.rank();
    if r < 2 {
        return Ok(());
    }
    let radius: i64 = match r {
        2 => 12,
        3 => 5,
        _ => 2,
    };
    let side = (2 * radius + 1) as usize;
    let count = side.pow(r as u32);
    let points: Vec<Vec<i64>> = (0..count)
        .map(|mut k| {
            (0..r)
                .map(|_| {
                    let v = (k % side) as i64 - radius;
                    k /= side;
                    v
                })
                .collect()
        })
        .collect();
    lattice.check_collisions(points.iter())
}

/// Ready-made models used by tests, examples and the acceptance suite.
pub mod presets {
    use super::*;

    fn cos_axis(n: usize, axis: usize, amplitude: f64) -> TrigTerm {
        let mut freq = vec![0; n];
        freq[axis] = 1;
        TrigTerm::new(freq, amplitude, 0.0)
    }

    /// `T^1`, `F = cos(theta)`.
    pub fn circle_exact() -> ManifoldSpec {
        ManifoldSpec { dim: 1, periods: vec![0.0], metric: None, terms: vec![cos_axis(1, 0, 1.0)] }
    }

    /// `T^1`, `omega = kappa dtheta + d(amplitude cos theta)`.
    pub fn circle_novikov(kappa: f64, amplitude: f64) -> ManifoldSpec {
        ManifoldSpec { dim: 1, periods: vec![kappa], metric: None, terms: vec![cos_axis(1, 0, amplitude)] }
    }

    /// `T^2`, `F = cos(theta_1) + cos(theta_2)`.
    pub fn torus_exact() -> ManifoldSpec {
        ManifoldSpec {
            dim: 2,
            periods: vec![0.0, 0.0],
            metric: None,
            terms: vec![cos_axis(2, 0, 1.0), cos_axis(2, 1, 1.0)],
        }
    }

    /// `T^2`, `omega = kappa dtheta_1 + scale * d(cos(theta_1) + cos(theta_2))`.
    pub fn torus_novikov(kappa: f64, scale: f64) -> ManifoldSpec {
        ManifoldSpec {
            dim: 2,
            periods: vec![kappa, 0.0],
            metric: None,
            terms: vec![cos_axis(2, 0, scale), cos_axis(2, 1, scale)],
        }
    }

    /// The Novikov instance used throughout the acceptance suite.
    pub fn torus_novikov_default() -> ManifoldSpec {
        torus_novikov(0.3, 0.5)
    }

    /// `T^n` with constant form and no perturbation.
    pub fn constant(periods: Vec<f64>) -> ManifoldSpec {
        ManifoldSpec { dim: periods.len(), periods, metric: None, terms: vec![] }
    }

    /// Product of two specs on `T^(n1 + n2)`.
    pub fn product(a: &ManifoldSpec, b: &ManifoldSpec) -> ManifoldSpec {
        let n = a.dim + b.dim;
        let mut periods = a.periods.clone();
        periods.extend_from_slice(&b.periods);
        let mut terms = Vec::new();
        for t in &a.terms {
            let mut f = t.freq.clone();
            f.extend(std::iter::repeat(0).take(b.dim));
            terms.push(TrigTerm::new(f, t.amplitude, t.phase));
        }
        for t in &b.terms {
            let mut f = vec![0; a.dim];
            f.extend_from_slice(&t.freq);
            terms.push(TrigTerm::new(f, t.amplitude, t.phase));
        }
        let metric = match (&a.metric, &b.metric) {
            (None, None) => None,
            _ => {
                let ga = a.metric.clone().unwrap_or_else(|| identity_rows(a.dim));
                let gb = b.metric.clone().unwrap_or_else(|| identity_rows(b.dim));
                let mut g = vec![vec![0.0; n]; n];
                for i in 0..a.dim {
                    for j in 0..a.dim {
                        g[i][j] = ga[i][j];
                    }
                }
                for i in 0..b.dim {
                    for j in 0..b.dim {
                        g[a.dim + i][a.dim + j] = gb[i][j];
                    }
                }
                Some(g)
            }
        };
        ManifoldSpec { dim: n, periods, metric, terms }
    }

    fn identity_rows(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    fn model(spec: ManifoldSpec) -> ModelManifold {
        ModelManifold::new(spec).unwrap()
    }

    #[test]
    fn exact_torus_zeros() {
        let m = model(torus_exact());
        let z = m.find_zeros(16, &ZeroOptions::default()).unwrap();
        let got: Vec<(Vec<f64>, usize)> = z.iter().map(|c| (c.position.clone(), c.index)).collect();
        let expect = [(vec![0.0, 0.0], 2), (vec![0.0, PI], 1), (vec![PI, 0.0], 1), (vec![PI, PI], 0)];
        assert_eq!(got.len(), 4);
        for ((p, i), (ep, ei)) in got.iter().zip(expect.iter()) {
            assert_eq!(i, ei);
            assert!(torus_distance(p, ep) < 1e-9, "{p:?} vs {ep:?}");
        }
    }

    #[test]
    fn constant_form_has_no_zeros() {
        let m = model(constant(vec![1.0, 2f64.sqrt()]));
        assert!(m.find_zeros(8, &ZeroOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn shifted_zeros() {
        let mut spec = torus_exact();
        spec.periods = vec![0.5, 0.0];
        let m = model(spec);
        let z = m.find_zeros(16, &ZeroOptions::default()).unwrap();
        let a = 0.5f64.asin();
        assert_eq!(z.len(), 4);
        for c in &z {
            // Zeros of -sin(x1) + 0.5 and -sin(x2): sin(x1) = 0.5, sin(x2) = 0.
            let x1 = c.position[0];
            assert!((x1 - a).abs() < 1e-9 || (x1 - (PI - a)).abs() < 1e-9);
            assert!(c.position[1].abs() < 1e-9 || (c.position[1] - PI).abs() < 1e-9);
        }
    }

    #[test]
    fn index_at_max_and_min() {
        let m = model(torus_exact());
        let o = ZeroOptions::default();
        let (i, h) = m.hessian_index(&[0.0, 0.0], &o).unwrap();
        assert_eq!(i, 2);
        assert!((h[(0, 0)] + 1.0).abs() < 1e-15 && (h[(1, 1)] + 1.0).abs() < 1e-15);
        assert_eq!(m.hessian_index(&[PI, PI], &o).unwrap().0, 0);
    }

    #[test]
    fn degenerate_zero_is_reported() {
        let spec = ManifoldSpec {
            dim: 2,
            periods: vec![0.0, 0.0],
            metric: None,
            terms: vec![TrigTerm::new(vec![1, 0], 1.0, 0.0)],
        };
        let m = model(spec);
        let o = ZeroOptions::default();
        assert!(matches!(m.hessian_index(&[0.0, 0.0], &o), Err(ManifoldError::DegenerateZero { .. })));
        assert!(matches!(m.find_zeros(8, &o), Err(ManifoldError::DegenerateZero { .. })));
    }

    #[test]
    fn h_lift_deck_shift() {
        let m = model(constant(vec![1.0, 2f64.sqrt()]));
        assert!((m.h_lift(&[TWO_PI, 0.0]) - m.h_lift(&[0.0, 0.0]) - TWO_PI).abs() < 1e-12);
        let d = m.h_lift(&[TWO_PI, TWO_PI]) - m.h_lift(&[0.0, 0.0]);
        assert!((d - TWO_PI * (1.0 + 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn h_lift_difference_of_f() {
        let m = model(torus_exact());
        assert!((m.h_lift(&[0.0, 0.0]) - m.h_lift(&[PI, PI]) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn euler_characteristic_of_tori() {
        for spec in [torus_exact(), torus_novikov_default(), circle_exact()] {
            let m = model(spec);
            let z = m.find_zeros(16, &ZeroOptions::default()).unwrap();
            assert_eq!(ModelManifold::euler_characteristic(&z), 0);
        }
    }

    #[test]
    fn literal_weak_perturbation_has_no_zeros() {
        let m = model(torus_novikov(0.3, 0.1));
        assert!(m.find_zeros(16, &ZeroOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn dependent_periods_rejected() {
        assert!(ModelManifold::new(constant(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn section_lift_in_first_period() {
        let m = model(torus_novikov_default());
        let p = TWO_PI * 0.3;
        for c in m.find_zeros(16, &ZeroOptions::default()).unwrap() {
            let deck = m.section_deck(&c);
            let h = m.lift(&c, deck).h_value;
            assert!((0.0..p).contains(&h), "{h}");
        }
    }

    #[test]
    fn metric_frame_is_orthonormal() {
        let mut spec = torus_exact();
        spec.metric = Some(vec![vec![2.0, 0.3], vec![0.3, 1.0]]);
        let m = model(spec);
        let z = m.find_zeros(16, &ZeroOptions::default()).unwrap();
        for c in &z {
            for a in &c.eigenvectors {
                for b in &c.eigenvectors {
                    let va = DVector::from_vec(a.clone());
                    let vb = DVector::from_vec(b.clone());
                    let g = (va.transpose() * m.metric() * vb)[(0, 0)];
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((g - e).abs() < 1e-10);
                }
            }
        }
    }
}
