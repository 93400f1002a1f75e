//! Integration of forms over unstable manifolds and recovery of the
//! incidence matrices from the small eigenspaces of the Witten Laplacian.
//!
//! `Int_s(alpha)(x) = integral over W^-(x) of exp(s (h - h(x))) alpha`, with
//! `W^-(x)` oriented by the unstable frame of `x`. Stokes' theorem turns
//! `d_s = d + s omega ^` into the boundary map of the Novikov complex
//! specialized at `s`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_flow::{
    classify_top_basins, connections_from, integrate_path, BasinSample, CaptureRule, FlowError, FlowOptions, IncidenceTable, PathSpec,
    Terminal,
};
use crate::model_manifold::{torus_displacement, CriticalPoint, ModelManifold, TWO_PI};
use crate::novikov_complex::{specialize, NovikovComplex};
use crate::novikov_ring::{fit_integer_coefficients, IntegerFitOptions};
use crate::witten_spectral::{
    build_quasimode, cutoff, multi_indices, spectrum, Discretization, EigenOptions, FormField, OperatorHandle,
    OperatorKind, QuasimodeOptions, SpectralError, TrigInterpolant,
};

type C = Complex64;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("integral over W^-({x}) not exhausted: tail bound {tail:.3e} above {tol:.1e}")]
    InsufficientExhaustion { x: usize, tail: f64, tol: f64 },
    #[error("unstable manifolds of index {index} in dimension {n} are not supported")]
    Unsupported { index: usize, n: usize },
    #[error("a {form}-form cannot be integrated over an index {chart} manifold")]
    DegreeMismatch { form: usize, chart: usize },
    #[error("incidence table belongs to another model")]
    ManifoldMismatch,
    #[error("chain-map identity fails in degree {}: residual {:.3e} above {:.1e}", .0.q, .0.max_residual, .1)]
    ChainMap(Box<ChainMapReport>, f64),
    #[error("degree {q}: {found} eigenvalues below the threshold at t = {t}, expected {expected}")]
    GapNotVerified { q: usize, t: f64, expected: usize, found: usize },
    #[error("degree {q}: integration matrix has condition {condition:.3e} at t = {t}")]
    IllConditioned { q: usize, t: f64, condition: f64 },
    #[error("degree {q}: d_t leaks {leakage:.3e} out of the small subspace at t = {t}")]
    Leakage { q: usize, t: f64, leakage: f64 },
    #[error("bad input: {0}")]
    BadInput(String),
}

/// A differential form that can be evaluated anywhere on the torus.
pub trait FormEval: Sync {
    fn dim(&self) -> usize;
    fn degree(&self) -> usize;
    /// Components in lexicographic multi-index order.
    fn eval(&self, p: &[f64]) -> Vec<C>;
    /// Exact values at node `node` of a `grid^n` grid, when known.
    fn node_value(&self, _grid: usize, _node: usize) -> Option<Vec<C>> {
        None
    }
    /// An upper bound for the pointwise component size.
    fn sup_norm(&self) -> f64;
}

/// A grid form with its trigonometric interpolant.
#[derive(Debug, Clone)]
pub struct GridForm {
    field: FormField,
    interp: TrigInterpolant,
    sup: f64,
}

impl GridForm {
    pub fn new(field: FormField) -> Self {
        let interp = field.interpolant();
        let sup = field.components.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max);
        GridForm { field, interp, sup }
    }

    pub fn field(&self) -> &FormField {
        &self.field
    }
}

impl FormEval for GridForm {
    fn dim(&self) -> usize {
        self.field.n
    }
    fn degree(&self) -> usize {
        self.field.degree
    }
    fn eval(&self, p: &[f64]) -> Vec<C> {
        self.interp.eval(p)
    }
    fn node_value(&self, grid: usize, node: usize) -> Option<Vec<C>> {
        (grid == self.field.grid).then(|| self.field.components.iter().map(|c| c[node]).collect())
    }
    fn sup_norm(&self) -> f64 {
        // Interpolation can overshoot node values slightly.
        2.0 * self.sup
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChartKind {
    /// A minimum: integration is evaluation.
    Point,
    /// Index one: two flow lines leaving along `+direction` and `-direction`.
    Curve { direction: Vec<f64>, r0: f64 },
    /// Top index in dimension two: flow lines from the launch circle,
    /// split at the angles of the separatrices that end at saddles.
    Rays { separatrices: Vec<f64>, r0: f64, frame: Vec<Vec<f64>>, orientation: f64 },
    /// Top index in higher dimension: grid nodes whose backward flow reaches the point.
    Top { samples: Vec<BasinSample>, grid: usize, orientation: f64, lost_weight: f64, max_h_rise: f64 },
}

/// Parameterization of one unstable manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstableChart {
    pub x: usize,
    pub index: usize,
    pub position: Vec<f64>,
    pub h_value: f64,
    pub kind: ChartKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChartOptions {
    /// Nodes per axis of the grid used for top-index manifolds.
    pub basin_grid: usize,
    /// Flow lines are followed until `h` has dropped by this much.
    pub max_h_drop: f64,
    /// Largest tail bound, relative to the integral of the absolute integrand.
    pub tail_tol: f64,
    /// Geometrically graded Gauss-Legendre panels per half arc of a ray chart.
    pub ray_panels: usize,
    pub flow: FlowOptions,
}

impl Default for ChartOptions {
    fn default() -> Self {
        ChartOptions { basin_grid: 48, max_h_drop: 40.0, tail_tol: 1e-6, ray_panels: 16, flow: FlowOptions::default() }
    }
}

/// Builds one chart per critical point, in the order of `points`.
pub fn build_charts(
    m: &ModelManifold,
    points: &[CriticalPoint],
    opts: &ChartOptions,
) -> Result<Vec<UnstableChart>, BridgeError> {
    let n = m.dim();
    let has_top = n >= 3 && points.iter().any(|c| c.index == n);
    let basins = if has_top {
        classify_top_basins(m, points, opts.basin_grid, opts.max_h_drop, &opts.flow)?
    } else {
        Vec::new()
    };
    points
        .iter()
        .map(|c| {
            let kind = match c.index {
                0 => ChartKind::Point,
                1 => ChartKind::Curve { direction: c.unstable_frame()[0].clone(), r0: opts.flow.launch_radius(c) },
                2 if n == 2 => {
                    let bound = (opts.max_h_drop - opts.flow.action_margin).max(0.0);
                    let trajs = connections_from(m, points, c, bound, opts.flow.n_directions, &opts.flow)?;
                    let mut separatrices: Vec<f64> = trajs.iter().map(|t| t.param.rem_euclid(TWO_PI)).collect();
                    separatrices.sort_by(f64::total_cmp);
                    separatrices.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                    let frame = c.unstable_frame().to_vec();
                    let orientation = (frame[0][0] * frame[1][1] - frame[0][1] * frame[1][0]).signum();
                    ChartKind::Rays { separatrices, r0: opts.flow.launch_radius(c), frame, orientation }
                }
                k if k == n => {
                    let samples: Vec<BasinSample> = basins.iter().filter(|b| b.target == c.id).cloned().collect();
                    let frame = DMatrix::from_fn(n, n, |r, col| c.eigenvectors[col][r]);
                    let orientation = frame.determinant().signum();
                    let total = opts.basin_grid.pow(n as u32) as f64;
                    let captured: f64 = basins.iter().map(|b| b.weight).sum();
                    ChartKind::Top {
                        samples,
                        grid: opts.basin_grid,
                        orientation,
                        lost_weight: (total - captured).max(0.0),
                        max_h_rise: opts.max_h_drop,
                    }
                }
                k => return Err(BridgeError::Unsupported { index: k, n }),
            };
            Ok(UnstableChart { x: c.id, index: c.index, position: c.position.clone(), h_value: c.h_value, kind })
        })
        .collect()
}

/// Value of an integral with a bound on the part that was not computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntValue {
    pub value: C,
    /// Integral of the absolute value of the integrand.
    pub magnitude: f64,
    pub tail_bound: f64,
}

const GL5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// `int_a^b` of the weighted form along the segment `a -> b`.
fn segment_integral(m: &ModelManifold, form: &dyn FormEval, s: C, h_ref: f64, a: &[f64], b: &[f64]) -> (C, f64) {
    let dir: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mut val = C::new(0.0, 0.0);
    let mut mag = 0.0;
    for (node, w) in GL5 {
        let sigma = 0.5 * (node + 1.0);
        let p: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + sigma * d).collect();
        let f = form.eval(&p);
        let v: C = f.iter().zip(&dir).map(|(fi, di)| fi * di).sum::<C>() * (s * (m.h_lift(&p) - h_ref)).exp();
        val += v * (0.5 * w);
        mag += v.norm() * 0.5 * w;
    }
    (val, mag)
}

/// `Int_s(form)` over the unstable manifold described by `chart`.
pub fn int_s(
    form: &dyn FormEval,
    chart: &UnstableChart,
    s: C,
    m: &ModelManifold,
    points: &[CriticalPoint],
    opts: &ChartOptions,
) -> Result<IntValue, BridgeError> {
    if form.degree() != chart.index {
        return Err(BridgeError::DegreeMismatch { form: form.degree(), chart: chart.index });
    }
    if form.dim() != m.dim() {
        return Err(BridgeError::BadInput("form and model dimensions differ".into()));
    }
    let n = m.dim();
    let h_ref = chart.h_value;
    let out = match &chart.kind {
        ChartKind::Point => {
            let v = form.eval(&chart.position)[0];
            IntValue { value: v, magnitude: v.norm(), tail_bound: 0.0 }
        }
        ChartKind::Curve { direction, r0 } => {
            let a: Vec<f64> = chart.position.iter().zip(direction).map(|(p, u)| p - r0 * u).collect();
            let b: Vec<f64> = chart.position.iter().zip(direction).map(|(p, u)| p + r0 * u).collect();
            let (mut value, mut magnitude) = segment_integral(m, form, s, h_ref, &a, &b);
            let mut tail_bound = 0.0;
            let integrand = |p: &[f64], pdot: &[f64], _: &[Vec<f64>], out: &mut [f64]| {
                let f = form.eval(p);
                let v: C = f.iter().zip(pdot).map(|(fi, di)| fi * di).sum::<C>() * (s * (m.h_lift(p) - h_ref)).exp();
                out[0] = v.re;
                out[1] = v.im;
                out[2] = v.norm();
            };
            let rule = |c: &CriticalPoint| if c.index == 0 { CaptureRule::Capture } else { CaptureRule::Ignore };
            for (sign, start) in [(1.0, b), (-1.0, a)] {
                let spec = PathSpec {
                    start: start.clone(),
                    tangents: vec![],
                    orthonormalize: false,
                    backward: false,
                    rule: &rule,
                    h_ref,
                    max_h_change: opts.max_h_drop,
                    integrand: Some(&integrand),
                    n_quad: 3,
                    levels: &[],
                    record_samples: false,
                    skip_radius: 0.0,
                };
                let res = integrate_path(m, points, &spec, &opts.flow, chart.x)?;
                value += C::new(res.quad[0], res.quad[1]) * sign;
                magnitude += res.quad[2];
                match res.terminal {
                    Terminal::Captured { id, deck } => {
                        let y = points.iter().find(|c| c.id == id).expect("captured point exists");
                        let target: Vec<f64> = (0..n).map(|i| y.position[i] + TWO_PI * deck[i] as f64).collect();
                        let (v, mg) = segment_integral(m, form, s, h_ref, &res.end, &target);
                        value += v * sign;
                        magnitude += mg;
                    }
                    Terminal::Escaped => {
                        let drop = h_ref - m.h_lift(&res.end);
                        let speed = m.omega(&res.end).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                        tail_bound += if s.re > 0.0 {
                            form.sup_norm() * (-s.re * drop).exp() / (s.re * speed)
                        } else {
                            f64::INFINITY
                        };
                    }
                    _ => tail_bound = f64::INFINITY,
                }
            }
            IntValue { value, magnitude, tail_bound }
        }
        ChartKind::Rays { separatrices, r0, frame, orientation } => {
            let nodes = ray_nodes(separatrices, opts.ray_panels);
            let runs: Vec<Result<(C, f64, f64), BridgeError>> = nodes
                .par_iter()
                .map(|&(phi, w)| {
                    let (v, mg, tail) = ray_integral(form, m, points, chart, s, *r0, frame, phi, opts)?;
                    Ok((v * w, mg * w, tail * w))
                })
                .collect();
            let center = disk_integral(m, form, &chart.position, chart.h_value, s, *r0, 2, 32) * *orientation;
            let mut value = center;
            let mut magnitude = center.norm();
            let mut tail_bound = 0.0;
            for r in runs {
                let (v, mg, tl) = r?;
                value += v;
                magnitude += mg;
                tail_bound += tl;
            }
            IntValue { value, magnitude, tail_bound }
        }
        ChartKind::Top { samples, grid, orientation, lost_weight, max_h_rise } => {
            let cell = (TWO_PI / *grid as f64).powi(n as i32);
            let mut value = C::new(0.0, 0.0);
            let mut magnitude = 0.0;
            for smp in samples {
                let f = match form.node_value(*grid, smp.node) {
                    Some(v) if smp.weight == 1.0 => v,
                    _ => form.eval(&smp.point),
                };
                let v = f[0] * (s * smp.h_rel).exp() * (smp.weight * cell);
                value += v * *orientation;
                magnitude += v.norm();
            }
            let tail_bound = if *lost_weight == 0.0 {
                0.0
            } else if s.re > 0.0 {
                lost_weight * cell * form.sup_norm() * (-s.re * max_h_rise).exp()
            } else {
                f64::INFINITY
            };
            IntValue { value, magnitude, tail_bound }
        }
    };
    if out.tail_bound > opts.tail_tol * out.magnitude.max(f64::MIN_POSITIVE) {
        return Err(BridgeError::InsufficientExhaustion { x: chart.x, tail: out.tail_bound, tol: opts.tail_tol });
    }
    Ok(out)
}

const RAY_GRADING: f64 = 0.3;
const RAY_RTOL: f64 = 1e-8;
const MAX_RAY_PANELS: usize = 16;

/// Angular nodes and weights: geometrically graded Gauss-Legendre panels on each arc
/// between consecutive separatrices, or the periodic trapezoid rule when
/// there are none.
fn ray_nodes(separatrices: &[f64], panels: usize) -> Vec<(f64, f64)> {
    // Finer grading than the separatrix angle accuracy only reaches the saddles.
    let panels = panels.clamp(1, MAX_RAY_PANELS);
    if separatrices.is_empty() {
        let k = 5 * panels * 2;
        return (0..k).map(|j| (TWO_PI * (j as f64 + 0.5) / k as f64, TWO_PI / k as f64)).collect();
    }
    let mut out = Vec::new();
    let k = separatrices.len();
    for i in 0..k {
        let a = separatrices[i];
        let b = if i + 1 < k { separatrices[i + 1] } else { separatrices[0] + TWO_PI };
        // Geometrically graded panels toward both separatrices.
        let half = 0.5 * (b - a);
        let mut edges = vec![a];
        for j in (0..panels).rev() {
            edges.push(a + half * RAY_GRADING.powi(j as i32));
        }
        for j in 1..panels {
            edges.push(b - half * RAY_GRADING.powi(j as i32));
        }
        edges.push(b);
        for e in edges.windows(2) {
            for (node, w) in GL5 {
                out.push((e[0] + 0.5 * (node + 1.0) * (e[1] - e[0]), 0.5 * w * (e[1] - e[0])));
            }
        }
    }
    out
}

/// Flow-time integral of `exp(s h^x) form(d_tau p, d_phi p)` along the ray at angle `phi`.
#[allow(clippy::too_many_arguments)]
fn ray_integral(
    form: &dyn FormEval,
    m: &ModelManifold,
    points: &[CriticalPoint],
    chart: &UnstableChart,
    s: C,
    r0: f64,
    frame: &[Vec<f64>],
    phi: f64,
    opts: &ChartOptions,
) -> Result<(C, f64, f64), BridgeError> {
    let n = m.dim();
    let (c, sn) = (phi.cos(), phi.sin());
    let start: Vec<f64> = (0..n).map(|i| chart.position[i] + r0 * (c * frame[0][i] + sn * frame[1][i])).collect();
    let tangent: Vec<f64> = (0..n).map(|i| r0 * (-sn * frame[0][i] + c * frame[1][i])).collect();
    let h_ref = chart.h_value;
    let integrand = |p: &[f64], pdot: &[f64], tangents: &[Vec<f64>], out: &mut [f64]| {
        let v = &tangents[0];
        let jac = pdot[0] * v[1] - pdot[1] * v[0];
        let val = form.eval(p)[0] * (s * (m.h_lift(p) - h_ref)).exp() * jac;
        out[0] = val.re;
        out[1] = val.im;
        out[2] = val.norm();
    };
    let rule = |c: &CriticalPoint| if c.index == 0 { CaptureRule::Capture } else { CaptureRule::Ignore };
    let spec = PathSpec {
        start,
        tangents: vec![tangent],
        orthonormalize: false,
        backward: false,
        rule: &rule,
        h_ref,
        max_h_change: opts.max_h_drop,
        integrand: Some(&integrand),
        n_quad: 3,
        levels: &[],
        record_samples: false,
        skip_radius: 0.0,
    };
    let mut loose = opts.flow;
    loose.rtol = opts.flow.rtol.max(RAY_RTOL);
    loose.atol = opts.flow.atol.max(RAY_RTOL * 1e-2);
    let res = integrate_path(m, points, &spec, &loose, chart.x)?;
    let tail = match res.terminal {
        Terminal::Captured { .. } => 0.0,
        Terminal::Escaped if s.re > 0.0 => {
            let drop = h_ref - m.h_lift(&res.end);
            let speed = m.omega(&res.end).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let width = res.tangents[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            form.sup_norm() * width * (-s.re * drop).exp() / (s.re * speed)
        }
        _ => f64::INFINITY,
    };
    Ok((C::new(res.quad[0], res.quad[1]), res.quad[2], tail))
}

fn chart_for(charts: &[UnstableChart], id: usize) -> Result<&UnstableChart, BridgeError> {
    charts.iter().find(|c| c.x == id).ok_or_else(|| BridgeError::BadInput(format!("no chart for point {id}")))
}

/// One term `count * exp(-s action) * Int_s(alpha)(y)` of the boundary side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTerm {
    pub y: usize,
    pub deck: Vec<i64>,
    pub count: i64,
    pub action: f64,
    pub value: C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMapRow {
    pub x: usize,
    /// `Int_s(d_s alpha)(x)`.
    pub lhs: C,
    pub rhs: C,
    pub terms: Vec<ChainTerm>,
    pub scale: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMapReport {
    pub q: usize,
    pub s: C,
    pub rows: Vec<ChainMapRow>,
    pub max_residual: f64,
}

/// Checks `Int_s(d_s alpha) = D_s Int_s(alpha)` at every point of index
/// `deg(alpha) + 1`. Residuals are relative to the largest of `|lhs|`, the
/// summed term sizes and the absolute integral on the left.
#[allow(clippy::too_many_arguments)]
pub fn verify_chain_map(
    alpha: &FormField,
    s: C,
    m: &ModelManifold,
    points: &[CriticalPoint],
    charts: &[UnstableChart],
    table: &IncidenceTable,
    disc: &Discretization,
    opts: &ChartOptions,
    tol: f64,
) -> Result<ChainMapReport, BridgeError> {
    if table.manifold_hash != m.content_hash() {
        return Err(BridgeError::ManifoldMismatch);
    }
    let q = alpha.degree;
    if q >= m.dim() {
        return Err(BridgeError::BadInput(format!("degree {q} has no boundary side")));
    }
    let d_alpha = GridForm::new(disc.d_s(alpha, s));
    let alpha = GridForm::new(alpha.clone());
    let mut lower: Vec<(usize, IntValue)> = Vec::new();
    for c in points.iter().filter(|c| c.index == q) {
        lower.push((c.id, int_s(&alpha, chart_for(charts, c.id)?, s, m, points, opts)?));
    }
    let mut xs: Vec<&CriticalPoint> = points.iter().filter(|c| c.index == q + 1).collect();
    xs.sort_by_key(|c| c.id);
    let mut rows = Vec::new();
    for x in xs {
        let left = int_s(&d_alpha, chart_for(charts, x.id)?, s, m, points, opts)?;
        let mut terms = Vec::new();
        for e in table.entries.iter().filter(|e| e.x == x.id) {
            let Some((_, iv)) = lower.iter().find(|(id, _)| *id == e.y) else { continue };
            terms.push(ChainTerm {
                y: e.y,
                deck: e.deck.clone(),
                count: e.count,
                action: e.action,
                value: (-s * e.action).exp() * iv.value * e.count as f64,
            });
        }
        let rhs: C = terms.iter().map(|t| t.value).sum();
        let scale = left.value.norm().max(terms.iter().map(|t| t.value.norm()).sum()).max(left.magnitude);
        let residual = if scale > 0.0 { (left.value - rhs).norm() / scale } else { 0.0 };
        rows.push(ChainMapRow { x: x.id, lhs: left.value, rhs, terms, scale, residual });
    }
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let report = ChainMapReport { q, s, rows, max_residual };
    if max_residual > tol {
        return Err(BridgeError::ChainMap(Box::new(report), tol));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisOptions {
    /// Eigenvalues below this are small.
    pub threshold: f64,
    /// Eigenvalues computed beyond the expected small count.
    pub extra: usize,
    pub max_condition: f64,
    /// Largest allowed component of `d_t v` outside the small subspace.
    pub leakage_tol: f64,
    /// Also measure `Int_t o R` against the identity.
    pub check_quasimodes: bool,
    pub eigen: EigenOptions,
    pub quasimode: QuasimodeOptions,
    pub charts: ChartOptions,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions {
            threshold: 1.0,
            extra: 2,
            max_condition: 1e6,
            leakage_tol: 1e-4,
            check_quasimodes: true,
            eigen: EigenOptions::default(),
            quasimode: QuasimodeOptions::default(),
            charts: ChartOptions::default(),
        }
    }
}

/// Small eigenspace in one degree and the basis dual to the critical points.
#[derive(Debug, Clone)]
pub struct DegreeBasis {
    pub q: usize,
    /// Critical points of index `q`, sorted by id.
    pub ids: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenforms spanning the small subspace.
    pub eigenforms: Vec<FormField>,
    /// `int_matrix[(x, j)] = Int_t(eigenforms[j])(x)`.
    pub int_matrix: DMatrix<C>,
    pub condition: f64,
    /// `basis[x]` satisfies `Int_t(basis[x])(y) = delta_xy`.
    pub basis: Vec<FormField>,
    /// Largest entry of `Int_t(basis) - id`.
    pub dual_error: f64,
    /// Largest entry of `Int_t o R - id` with each column divided by
    /// `Int_t(J_y)(y)`, where `R` is the Lowdin-orthonormalized projection
    /// of the quasimodes `J_y`.
    pub int_r_deviation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SmallBasis {
    pub t: f64,
    pub grid: usize,
    pub degrees: Vec<DegreeBasis>,
}

fn combine(forms: &[FormField], coeffs: &[C]) -> FormField {
    let mut out = FormField::zeros(forms[0].n, forms[0].degree, forms[0].grid);
    for (f, c) in forms.iter().zip(coeffs) {
        out.axpy(*c, f);
    }
    out
}

fn condition_number(a: &DMatrix<C>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let min = sv.min();
    if min > 0.0 {
        sv.max() / min
    } else {
        f64::INFINITY
    }
}

/// Computes the small eigenspaces of `Delta_t` in every degree and the
/// basis `E = V M^-1` dual to the critical points under `Int_t`.
pub fn build_small_basis(
    m: &ModelManifold,
    points: &[CriticalPoint],
    charts: &[UnstableChart],
    disc: &Arc<Discretization>,
    t: f64,
    opts: &BasisOptions,
) -> Result<SmallBasis, BridgeError> {
    let n = m.dim();
    let s = C::new(t, 0.0);
    let mut degrees = Vec::with_capacity(n + 1);
    for q in 0..=n {
        let mut ids: Vec<usize> = points.iter().filter(|c| c.index == q).map(|c| c.id).collect();
        ids.sort_unstable();
        let op = OperatorHandle { kind: OperatorKind::Laplacian, t, degree: q, disc: disc.clone() };
        let k = (ids.len() + opts.extra.max(1)).min(op.dim());
        let eig = spectrum(&op, k, &opts.eigen)?;
        let found = eig.values.iter().filter(|v| **v < opts.threshold).count();
        if found != ids.len() {
            return Err(BridgeError::GapNotVerified { q, t, expected: ids.len(), found });
        }
        let eigenforms: Vec<FormField> = eig.vectors[..found].to_vec();
        let eigenvalues = eig.values[..found].to_vec();
        let grid_forms: Vec<GridForm> = eigenforms.iter().cloned().map(GridForm::new).collect();
        let mut int_matrix = DMatrix::zeros(found, found);
        for (r, id) in ids.iter().enumerate() {
            let chart = chart_for(charts, *id)?;
            for (j, g) in grid_forms.iter().enumerate() {
                int_matrix[(r, j)] = int_s(g, chart, s, m, points, &opts.charts)?.value;
            }
        }
        let condition = condition_number(&int_matrix);
        if !(condition <= opts.max_condition) {
            return Err(BridgeError::IllConditioned { q, t, condition });
        }
        let (basis, dual_error) = if found == 0 {
            (Vec::new(), 0.0)
        } else {
            let inv = int_matrix.clone().try_inverse().ok_or(BridgeError::IllConditioned { q, t, condition })?;
            let basis: Vec<FormField> =
                (0..found).map(|x| combine(&eigenforms, &inv.column(x).iter().copied().collect::<Vec<_>>())).collect();
            let mut err = 0.0f64;
            for (r, id) in ids.iter().enumerate() {
                let chart = chart_for(charts, *id)?;
                for (x, b) in basis.iter().enumerate() {
                    let v = int_s(&GridForm::new(b.clone()), chart, s, m, points, &opts.charts)?.value;
                    let target = if r == x { 1.0 } else { 0.0 };
                    err = err.max((v - target).norm());
                }
            }
            (basis, err)
        };
        let int_r_deviation = if opts.check_quasimodes && found > 0 {
            Some(int_r_deviation(m, points, charts, &ids, &eigenforms, &int_matrix, disc.grid, t, opts)?)
        } else {
            None
        };
        degrees.push(DegreeBasis {
            q,
            ids,
            eigenvalues,
            eigenforms,
            int_matrix,
            condition,
            basis,
            dual_error,
            int_r_deviation,
        });
    }
    Ok(SmallBasis { t, grid: disc.grid, degrees })
}

#[allow(clippy::too_many_arguments)]
fn int_r_deviation(
    m: &ModelManifold,
    points: &[CriticalPoint],
    charts: &[UnstableChart],
    ids: &[usize],
    eigenforms: &[FormField],
    int_matrix: &DMatrix<C>,
    grid: usize,
    t: f64,
    opts: &BasisOptions,
) -> Result<f64, BridgeError> {
    let k = ids.len();
    let mut overlap = DMatrix::zeros(k, k);
    let mut diag = Vec::with_capacity(k);
    for (col, id) in ids.iter().enumerate() {
        let y = points.iter().find(|c| c.id == *id).expect("id from points");
        let j = build_quasimode(m, points, y, t, grid, &opts.quasimode)?;
        for (row, v) in eigenforms.iter().enumerate() {
            overlap[(row, col)] = v.inner(&j);
        }
        diag.push(int_s(&GridForm::new(j), chart_for(charts, *id)?, C::new(t, 0.0), m, points, &opts.charts)?.value);
    }
    let gram = overlap.adjoint() * &overlap;
    let eig = gram.symmetric_eigen();
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| C::new(1.0 / l.max(1e-300).sqrt(), 0.0)))
        * eig.eigenvectors.adjoint();
    let k_mat = int_matrix * overlap * inv_sqrt;
    let mut dev = 0.0f64;
    for r in 0..k {
        for c in 0..k {
            let target = if r == c { 1.0 } else { 0.0 };
            dev = dev.max((k_mat[(r, c)] / diag[c] - target).norm());
        }
    }
    Ok(dev)
}

/// The matrix of `d_t` from degree `q` to `q + 1` in the dual bases.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredMatrix {
    pub q: usize,
    pub t: f64,
    /// Points of index `q + 1`.
    pub rows: Vec<usize>,
    /// Points of index `q`.
    pub cols: Vec<usize>,
    pub values: DMatrix<C>,
    /// Largest norm of the part of `d_t v` outside the small subspace, for unit `v`.
    pub leakage: f64,
}

/// Reads off `d_t E_y = sum_x I_t(x, y) E_x` from the small eigenspaces.
pub fn recover_incidence(
    basis: &SmallBasis,
    disc: &Discretization,
    leakage_tol: f64,
) -> Result<Vec<RecoveredMatrix>, BridgeError> {
    let t = basis.t;
    let mut out = Vec::new();
    for w in basis.degrees.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        let (kl, kh) = (lo.ids.len(), hi.ids.len());
        let mut a = DMatrix::zeros(kh, kl);
        let mut leakage = 0.0f64;
        for (j, v) in lo.eigenforms.iter().enumerate() {
            let dv = disc.d_t(v, t);
            let mut rest = dv.clone();
            for (i, u) in hi.eigenforms.iter().enumerate() {
                let c = u.inner(&dv);
                a[(i, j)] = c;
                rest.axpy(-c, u);
            }
            leakage = leakage.max(rest.norm());
        }
        if leakage > leakage_tol {
            return Err(BridgeError::Leakage { q: lo.q, t, leakage });
        }
        let values = if kl == 0 || kh == 0 {
            DMatrix::zeros(kh, kl)
        } else {
            let inv = lo.int_matrix.clone().try_inverse().ok_or(BridgeError::IllConditioned {
                q: lo.q,
                t,
                condition: lo.condition,
            })?;
            &hi.int_matrix * a * inv
        };
        out.push(RecoveredMatrix { q: lo.q, t, rows: hi.ids.clone(), cols: lo.ids.clone(), values, leakage });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryOptions {
    /// Relative tolerance for nonzero entries.
    pub rel_tol: f64,
    /// Entries of the trajectory matrix below `zero_tol * max(1, max |entry|)`
    /// are compared with that absolute tolerance instead.
    pub zero_tol: f64,
    /// An exponent is fitted only when `exp(-t_min (H - H_min))` is above this.
    pub resolve_ratio: f64,
    pub basis: BasisOptions,
    pub fit: IntegerFitOptions,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            rel_tol: 0.05,
            zero_tol: 1e-3,
            resolve_ratio: 1e-3,
            basis: BasisOptions::default(),
            fit: IntegerFitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEntry {
    pub q: usize,
    pub t: f64,
    pub x: usize,
    pub y: usize,
    pub spectral: C,
    pub trajectory: C,
    /// Relative error, or absolute error for entries treated as zero.
    pub error: f64,
    pub relative: bool,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFit {
    pub q: usize,
    pub x: usize,
    pub y: usize,
    /// Distinct actions of the connecting trajectories.
    pub exponents: Vec<f64>,
    /// Signed trajectory counts summed per action.
    pub expected: Vec<i64>,
    pub resolved: Vec<bool>,
    /// Fitted counts for the resolved exponents.
    pub fitted: Option<Vec<i64>>,
    pub matches: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub t_grid: Vec<f64>,
    pub grid: usize,
    pub entries: Vec<RecoveryEntry>,
    pub fits: Vec<EntryFit>,
    pub max_leakage: f64,
    pub max_condition: f64,
    pub int_r_deviation: Vec<(f64, usize, f64)>,
    pub all_within: bool,
    pub all_fits_match: bool,
}

fn action_groups(table: &IncidenceTable, x: usize, y: usize) -> Vec<(f64, i64)> {
    let mut groups: Vec<(f64, i64)> = Vec::new();
    let mut entries = table.pair_entries(x, y);
    entries.sort_by(|a, b| a.action.total_cmp(&b.action));
    for e in entries {
        match groups.last_mut() {
            Some((h, c)) if (e.action - *h).abs() <= 1e-9 * (1.0 + h.abs()) => *c += e.count,
            _ => groups.push((e.action, e.count)),
        }
    }
    groups
}

/// Recovers the incidence matrices at every `t` of `t_grid`, compares them
/// with the trajectory complex specialized at `s = t`, and fits integer
/// counts to the recovered values.
pub fn recovery_report(
    m: &ModelManifold,
    points: &[CriticalPoint],
    table: &IncidenceTable,
    complex: &NovikovComplex,
    t_grid: &[f64],
    grid: usize,
    opts: &RecoveryOptions,
) -> Result<RecoveryReport, BridgeError> {
    if table.manifold_hash != m.content_hash() {
        return Err(BridgeError::ManifoldMismatch);
    }
    let charts = build_charts(m, points, &opts.basis.charts)?;
    let disc = Arc::new(Discretization::new(m, grid)?);
    let mut entries = Vec::new();
    let mut max_leakage = 0.0f64;
    let mut max_condition = 0.0f64;
    let mut int_r = Vec::new();
    // samples[(q, x, y)] = [(t, value)]
    let mut samples: Vec<((usize, usize, usize), Vec<(f64, f64)>)> = Vec::new();
    for &t in t_grid {
        let basis = build_small_basis(m, points, &charts, &disc, t, &opts.basis)?;
        for d in &basis.degrees {
            max_condition = max_condition.max(d.condition);
            if let Some(dev) = d.int_r_deviation {
                int_r.push((t, d.q, dev));
            }
        }
        let recovered = recover_incidence(&basis, &disc, opts.basis.leakage_tol)?;
        let reference = specialize(complex, C::new(t, 0.0), None);
        for rm in &recovered {
            max_leakage = max_leakage.max(rm.leakage);
            let traj = &reference.matrices[rm.q];
            if traj.nrows() != rm.rows.len() || traj.ncols() != rm.cols.len() {
                return Err(BridgeError::BadInput("complex and critical points disagree".into()));
            }
            let scale = traj.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
            for (r, &x) in rm.rows.iter().enumerate() {
                for (c, &y) in rm.cols.iter().enumerate() {
                    let spectral = rm.values[(r, c)];
                    let trajectory = traj[(r, c)];
                    let relative = trajectory.norm() >= opts.zero_tol * scale;
                    let (error, within) = if relative {
                        let e = (spectral - trajectory).norm() / trajectory.norm();
                        (e, e <= opts.rel_tol)
                    } else {
                        let e = (spectral - trajectory).norm();
                        (e, e <= opts.zero_tol * scale)
                    };
                    entries.push(RecoveryEntry { q: rm.q, t, x, y, spectral, trajectory, error, relative, within });
                    let key = (rm.q, x, y);
                    match samples.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, v)) => v.push((t, spectral.re)),
                        None => samples.push((key, vec![(t, spectral.re)])),
                    }
                }
            }
        }
    }
    let t_min = t_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let mut fits = Vec::new();
    for ((q, x, y), smp) in samples {
        let groups = action_groups(table, x, y);
        let exponents: Vec<f64> = groups.iter().map(|g| g.0).collect();
        let expected: Vec<i64> = groups.iter().map(|g| g.1).collect();
        let h_min = exponents.iter().copied().fold(f64::INFINITY, f64::min);
        let resolved: Vec<bool> =
            exponents.iter().map(|h| (-t_min * (h - h_min)).exp() >= opts.resolve_ratio).collect();
        let fit_exps: Vec<f64> = exponents.iter().zip(&resolved).filter(|(_, r)| **r).map(|(h, _)| *h).collect();
        let want: Vec<i64> = expected.iter().zip(&resolved).filter(|(_, r)| **r).map(|(c, _)| *c).collect();
        let (fitted, matches, note) = if fit_exps.is_empty() {
            let small = smp.iter().all(|(_, v)| v.abs() <= opts.zero_tol);
            (Some(vec![]), small, (!small).then(|| "nonzero values with no connecting trajectory".to_string()))
        } else {
            let fit_opts = IntegerFitOptions { min_scale: opts.fit.min_scale.max(opts.zero_tol), ..opts.fit };
            match fit_integer_coefficients(&smp, &fit_exps, &fit_opts) {
                Ok(f) => {
                    let ok = f.coefficients == want;
                    (Some(f.coefficients), ok, None)
                }
                Err(e) => (None, false, Some(e.to_string())),
            }
        };
        fits.push(EntryFit { q, x, y, exponents, expected, resolved, fitted, matches, note });
    }
    let all_within = entries.iter().all(|e| e.within);
    let all_fits_match = fits.iter().all(|f| f.matches);
    Ok(RecoveryReport {
        t_grid: t_grid.to_vec(),
        grid,
        entries,
        fits,
        max_leakage,
        max_condition,
        int_r_deviation: int_r,
        all_within,
        all_fits_match,
    })
}

/// A bump form at a critical point: `exp(-s (h - h(x)))` times a radial
/// bump of radius `radius` times the unstable volume form, scaled so that
/// its integral over the tangent space of `W^-(x)` is one.
pub struct BumpForm<'a> {
    m: &'a ModelManifold,
    center: Vec<f64>,
    h_center: f64,
    s: C,
    radius: f64,
    coeffs: Vec<f64>,
    degree: usize,
    normalization: f64,
}

impl<'a> BumpForm<'a> {
    pub fn new(m: &'a ModelManifold, x: &CriticalPoint, s: C, radius: f64) -> Self {
        let n = m.dim();
        let k = x.index;
        let frame = x.unstable_frame();
        let coeffs = multi_indices(n, k)
            .iter()
            .map(|ix| if k == 0 { 1.0 } else { DMatrix::from_fn(k, k, |r, c| frame[c][ix[r]]).determinant() })
            .collect();
        // Integral of the radial bump over R^k.
        let steps = 20_000;
        let dr = radius / steps as f64;
        let radial: f64 = (0..steps)
            .map(|i| {
                let r = (i as f64 + 0.5) * dr;
                cutoff(r, radius) * r.powi(k as i32 - 1) * dr
            })
            .sum();
        let sphere = match k {
            0 => 1.0,
            _ => {
                let half = k as f64 / 2.0;
                2.0 * std::f64::consts::PI.powf(half) / gamma(half)
            }
        };
        let normalization = if k == 0 { 1.0 } else { 1.0 / (sphere * radial) };
        BumpForm { m, center: x.position.clone(), h_center: x.h_value, s, radius, coeffs, degree: k, normalization }
    }
}

fn gamma(x: f64) -> f64 {
    // Half-integer arguments only.
    if (x - 0.5).abs() < 1e-12 {
        std::f64::consts::PI.sqrt()
    } else if (x - 1.0).abs() < 1e-12 {
        1.0
    } else {
        (x - 1.0) * gamma(x - 1.0)
    }
}

impl FormEval for BumpForm<'_> {
    fn dim(&self) -> usize {
        self.m.dim()
    }
    fn degree(&self) -> usize {
        self.degree
    }
    fn eval(&self, p: &[f64]) -> Vec<C> {
        let d = torus_displacement(&self.center, p);
        let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bump = cutoff(r, self.radius);
        if bump == 0.0 {
            return vec![C::new(0.0, 0.0); self.coeffs.len()];
        }
        let lifted: Vec<f64> = self.center.iter().zip(&d).map(|(a, b)| a + b).collect();
        let w = (-self.s * (self.m.h_lift(&lifted) - self.h_center)).exp() * (bump * self.normalization);
        self.coeffs.iter().map(|c| w * *c).collect()
    }
    fn sup_norm(&self) -> f64 {
        let growth = (self.s.re.abs() * self.radius * 10.0).exp();
        self.normalization * growth
    }
}

/// Deviations below this are at the level of the flow integration error.
const BUMP_NOISE: f64 = 1e-7;

/// Integral of the top component over the disk of radius `radius` around a
/// top-index point, which lies inside its unstable manifold for small radii.
/// Polar Gauss-Legendre in `r`, uniform in angle; coordinate orientation.
fn disk_integral(m: &ModelManifold, form: &dyn FormEval, center: &[f64], h_ref: f64, s: C, radius: f64, nr: usize, na: usize) -> C {
    let mut acc = C::new(0.0, 0.0);
    for seg in 0..nr {
        let (lo, hi) = (radius * seg as f64 / nr as f64, radius * (seg + 1) as f64 / nr as f64);
        for (node, w) in GL5 {
            let r = lo + 0.5 * (node + 1.0) * (hi - lo);
            let wr = 0.5 * w * (hi - lo) * r;
            for a in 0..na {
                let phi = TWO_PI * a as f64 / na as f64;
                let p = [center[0] + r * phi.cos(), center[1] + r * phi.sin()];
                let f = form.eval(&p);
                acc += f[0] * (s * (m.h_lift(&p) - h_ref)).exp() * (wr * TWO_PI / na as f64);
            }
        }
    }
    acc
}

/// `Int_s` of bump forms of shrinking radius at `x`. Top-index points in
/// dimension two use a polar quadrature on the disk around `x`, which lies
/// inside the unstable manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpCheck {
    pub x: usize,
    pub radii: Vec<f64>,
    /// `Int_s(alpha)(x)` for each radius.
    pub values: Vec<C>,
    /// `max |Int_s(alpha)(y)|` over the other points of the same index.
    pub off_diagonal: Vec<f64>,
    /// `|value - 1|` for each radius.
    pub deviations: Vec<f64>,
    /// Deviations do not increase as the radius shrinks (up to `1e-9`).
    pub monotone: bool,
}

pub fn bump_family_check(
    m: &ModelManifold,
    points: &[CriticalPoint],
    charts: &[UnstableChart],
    x: usize,
    s: C,
    radii: &[f64],
    opts: &ChartOptions,
) -> Result<BumpCheck, BridgeError> {
    let cx = points.iter().find(|c| c.id == x).ok_or_else(|| BridgeError::BadInput(format!("no point {x}")))?;
    let mut values = Vec::new();
    let mut off_diagonal = Vec::new();
    for &r in radii {
        let form = BumpForm::new(m, cx, s, r);
        let chart = chart_for(charts, x)?;
        let value = match &chart.kind {
            ChartKind::Rays { orientation, .. } => *orientation * disk_integral(m, &form, &cx.position, cx.h_value, s, r, 40, 128),
            _ => int_s(&form, chart, s, m, points, opts)?.value,
        };
        values.push(value);
        let mut off = 0.0f64;
        for c in points.iter().filter(|c| c.index == cx.index && c.id != x) {
            off = off.max(int_s(&form, chart_for(charts, c.id)?, s, m, points, opts)?.value.norm());
        }
        off_diagonal.push(off);
    }
    let deviations: Vec<f64> = values.iter().map(|v| (v - 1.0).norm()).collect();
    let monotone = deviations.windows(2).all(|w| w[1] <= w[0] + BUMP_NOISE);
    Ok(BumpCheck { x, radii: radii.to_vec(), values, off_diagonal, deviations, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient_flow::incidence_table;
    use crate::model_manifold::{presets, ManifoldSpec, ZeroOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(spec: ManifoldSpec) -> (ModelManifold, Vec<CriticalPoint>, Vec<UnstableChart>) {
        let m = ModelManifold::new(spec).unwrap();
        let z = m.find_zeros(16, &ZeroOptions::default()).unwrap();
        let charts = build_charts(&m, &z, &ChartOptions::default()).unwrap();
        (m, z, charts)
    }

    #[test]
    fn constant_function_at_a_minimum() {
        let (m, z, charts) = setup(presets::torus_exact());
        let one = GridForm::new(FormField::from_fn(2, 0, 16, |_| vec![C::new(1.0, 0.0)]));
        let min = z.iter().position(|c| c.index == 0).unwrap();
        let v = int_s(&one, &charts[min], C::new(0.0, 0.0), &m, &z, &ChartOptions::default()).unwrap();
        assert!((v.value - 1.0).norm() < 1e-12);
    }

    #[test]
    fn integration_is_linear() {
        let (m, z, charts) = setup(presets::torus_novikov_default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = C::new(2.0, 0.5);
        let (a, b) = (C::new(0.7, -0.2), C::new(-1.3, 0.4));
        for q in 0..=2 {
            let f = FormField::random_band_limited(2, q, 32, 3, &mut rng);
            let g = FormField::random_band_limited(2, q, 32, 3, &mut rng);
            let mut h = f.clone();
            h.scale(a);
            h.axpy(b, &g);
            let (f, g, h) = (GridForm::new(f), GridForm::new(g), GridForm::new(h));
            for ch in charts.iter().filter(|c| c.index == q) {
                let o = ChartOptions::default();
                let vf = int_s(&f, ch, s, &m, &z, &o).unwrap().value;
                let vg = int_s(&g, ch, s, &m, &z, &o).unwrap().value;
                let vh = int_s(&h, ch, s, &m, &z, &o).unwrap();
                assert!((vh.value - (a * vf + b * vg)).norm() <= 1e-10 * vh.magnitude.max(1.0), "q = {q}");
            }
        }
    }

    #[test]
    fn degree_must_match_index() {
        let (m, z, charts) = setup(presets::torus_exact());
        let f = GridForm::new(FormField::zeros(2, 1, 16));
        let min = charts.iter().find(|c| c.index == 0).unwrap();
        assert!(matches!(
            int_s(&f, min, C::new(1.0, 0.0), &m, &z, &ChartOptions::default()),
            Err(BridgeError::DegreeMismatch { .. })
        ));
    }

    #[test]
    fn chain_map_on_exact_torus() {
        let (m, z, charts) = setup(presets::torus_exact());
        let table = incidence_table(&m, &z, 6.0, &FlowOptions::default()).unwrap();
        let disc = Discretization::new(&m, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for q in 0..2 {
            let a = FormField::random_band_limited(2, q, 32, 4, &mut rng);
            let rep = verify_chain_map(&a, C::new(2.0, 0.0), &m, &z, &charts, &table, &disc, &ChartOptions::default(), 1e-4)
                .unwrap();
            assert_eq!(rep.rows.len(), z.iter().filter(|c| c.index == q + 1).count());
            assert!(rep.max_residual < 1e-4);
        }
    }

    #[test]
    fn chain_map_on_a_kernel_element() {
        // exp(-s F) is d_s-closed on the exact model; both sides vanish.
        let (m, z, charts) = setup(presets::torus_exact());
        let table = incidence_table(&m, &z, 6.0, &FlowOptions::default()).unwrap();
        let disc = Discretization::new(&m, 48).unwrap();
        let s = 1.5;
        let a = FormField::from_fn(2, 0, 48, |p| vec![C::new((-s * m.h_lift(p)).exp(), 0.0)]);
        let err = verify_chain_map(&a, C::new(s, 0.0), &m, &z, &charts, &table, &disc, &ChartOptions::default(), 1.0)
            .unwrap();
        for row in &err.rows {
            assert!(row.lhs.norm() < 1e-8 && row.rhs.norm() < 1e-8, "{row:?}");
        }
    }

    #[test]
    fn chain_map_without_points_is_vacuous() {
        let m = ModelManifold::new(presets::constant(vec![0.3, 0.3 * std::f64::consts::SQRT_2])).unwrap();
        let table = incidence_table(&m, &[], 5.0, &FlowOptions::default()).unwrap();
        let disc = Discretization::new(&m, 16).unwrap();
        let a = FormField::zeros(2, 0, 16);
        let rep =
            verify_chain_map(&a, C::new(1.0, 0.0), &m, &[], &[], &table, &disc, &ChartOptions::default(), 1e-3).unwrap();
        assert!(rep.rows.is_empty());
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn circle_basis_and_cancelling_recovery() {
        let (m, z, charts) = setup(presets::circle_exact());
        let disc = Arc::new(Discretization::new(&m, 64).unwrap());
        let basis = build_small_basis(&m, &z, &charts, &disc, 12.0, &BasisOptions::default()).unwrap();
        for d in &basis.degrees {
            assert_eq!(d.int_matrix.shape(), (1, 1));
            assert!(d.int_matrix[(0, 0)].norm() > 1e-3);
            assert!(d.dual_error < 1e-8);
        }
        let rec = recover_incidence(&basis, &disc, 1e-4).unwrap();
        assert_eq!(rec.len(), 1);
        assert!(rec[0].values[(0, 0)].norm() < 1e-3);
    }

    #[test]
    fn constant_form_has_empty_basis() {
        let m = ModelManifold::new(presets::circle_novikov(0.7, 0.0)).unwrap();
        let disc = Arc::new(Discretization::new(&m, 32).unwrap());
        let basis = build_small_basis(&m, &[], &[], &disc, 4.0, &BasisOptions::default()).unwrap();
        assert!(basis.degrees.iter().all(|d| d.ids.is_empty() && d.basis.is_empty()));
        assert!(recover_incidence(&basis, &disc, 1e-4).unwrap().iter().all(|r| r.values.is_empty()));
    }

    #[test]
    fn bump_family_approaches_one() {
        // A non-separable exact model, so that unstable curves are bent.
        let spec = ManifoldSpec {
            dim: 2,
            periods: vec![0.0, 0.0],
            metric: None,
            terms: vec![
                crate::model_manifold::TrigTerm::new(vec![1, 0], 1.0, 0.0),
                crate::model_manifold::TrigTerm::new(vec![0, 1], 1.0, 0.0),
                crate::model_manifold::TrigTerm::new(vec![1, 1], 0.3, 0.7),
            ],
        };
        let (m, z, charts) = setup(spec);
        for c in &z {
            let b = bump_family_check(&m, &z, &charts, c.id, C::new(2.0, 0.0), &[0.3, 0.15, 0.075], &ChartOptions::default())
                .unwrap();
            assert!(b.monotone, "{b:?}");
            assert!(b.deviations[2] < 1e-5, "{b:?}");
            assert!(b.off_diagonal.iter().all(|v| *v < 1e-12));
        }
    }
}
