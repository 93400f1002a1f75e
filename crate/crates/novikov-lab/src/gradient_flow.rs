//! Integration of `X = -grad_g omega`, shooting along unstable manifolds,
//! signed counts of connecting trajectories, and the growth exponent of
//! unstable-manifold volumes.
//!
//! All trajectories start at the canonical lift of a critical point (its
//! position in `[0, 2 pi)^n`) and end near a lift `position + 2 pi deck` of
//! another one. Counts are keyed by `(x, y, deck)`; deck equivariance makes
//! this the full table on the cover.
//!
//! Sign convention: the ordered unstable eigenvectors of `x` orient its
//! unstable manifold. That frame is transported along the trajectory by the
//! linearized flow and kept orthonormal without changing orientation. At the
//! capture point it is compared with the frame `(X/|X|, unstable frame of
//! y)`; the sign of the change-of-basis determinant is the sign of the
//! trajectory. With the flow direction first, Stokes' theorem on the
//! compactified unstable manifold holds without degree-dependent signs.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model_manifold::{torus_displacement, CriticalPoint, ModelManifold, TWO_PI};
use crate::ode::{self, Control, Finish, OdeError, Tolerances};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("integration failure from critical point {x}: {source}")]
    Integration { x: usize, source: OdeError },
    #[error("h failed to decrease along a trajectory from critical point {x} (jump {jump:.3e})")]
    NotMonotone { x: usize, jump: f64 },
    #[error("transversality violation between {x} and {y:?}: {detail}")]
    TransversalityViolation { x: usize, y: Option<usize>, detail: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Numerical parameters of the flow pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowOptions {
    pub capture_radius: f64,
    /// Launch radius before scaling by `min(1, min |eigenvalue|)`.
    pub r0: f64,
    pub bisection_tol: f64,
    /// Shooting directions on a one-dimensional unstable sphere.
    pub n_directions: usize,
    /// Extra mesh doublings allowed while waiting for counts to stabilize.
    pub max_refinements: usize,
    /// Escaped runs whose end points differ by more than this are separated
    /// by a connection.
    pub jump_tol: f64,
    /// Additional `h` drop beyond the action bound before a run is called escaped.
    pub action_margin: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            capture_radius: 1e-3,
            r0: 1e-4,
            bisection_tol: 1e-10,
            n_directions: 64,
            max_refinements: 2,
            jump_tol: 0.05,
            action_margin: 1.0,
            rtol: 1e-11,
            atol: 1e-13,
            max_steps: 100_000,
        }
    }
}

impl FlowOptions {
    pub(crate) fn tolerances(&self) -> Tolerances {
        Tolerances {
            rtol: self.rtol,
            atol: self.atol,
            h_init: 1e-2,
            h_min: 1e-14,
            h_max: 0.5,
            max_steps: self.max_steps,
            error_dims: usize::MAX,
        }
    }

    pub fn launch_radius(&self, cp: &CriticalPoint) -> f64 {
        self.r0 * cp.min_abs_eigenvalue().min(1.0)
    }
}

/// How a run treats the neighbourhood of a critical point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureRule {
    Capture,
    Ignore,
    Forbid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Terminal {
    Captured { id: usize, deck: Vec<i64> },
    Forbidden { id: usize, deck: Vec<i64> },
    Escaped,
    StepCap,
}

/// Integrand for quadrature along a path: `(p, pdot, tangents, out)`.
pub type PathIntegrand<'a> = dyn Fn(&[f64], &[f64], &[Vec<f64>], &mut [f64]) + Sync + 'a;

/// One integration along the flow.
pub struct PathSpec<'a> {
    pub start: Vec<f64>,
    /// Vectors transported by the linearized flow.
    pub tangents: Vec<Vec<f64>>,
    /// Keep the tangents orthonormal (orientation-preserving Gram-Schmidt).
    pub orthonormalize: bool,
    /// Follow `-X` instead of `X`.
    pub backward: bool,
    pub rule: &'a (dyn Fn(&CriticalPoint) -> CaptureRule + Sync),
    /// `h` of the critical lift the path starts from.
    pub h_ref: f64,
    /// Stop once `|h - h_ref|` exceeds this.
    pub max_h_change: f64,
    pub integrand: Option<&'a PathIntegrand<'a>>,
    pub n_quad: usize,
    /// Quadrature values are recorded when `|h - h_ref|` first passes each level.
    pub levels: &'a [f64],
    pub record_samples: bool,
    /// Skip capture tests until the path has left this radius around the start.
    pub skip_radius: f64,
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub terminal: Terminal,
    pub end: Vec<f64>,
    pub tangents: Vec<Vec<f64>>,
    pub quad: Vec<f64>,
    /// `level_quad[j]` is the quadrature at level `j` (or at the end of the run).
    pub level_quad: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
    pub steps: usize,
}

fn flow_jacobian(m: &ModelManifold, p: &[f64]) -> DMatrix<f64> {
    let h = m.hessian(p);
    if m.has_identity_metric() {
        -h
    } else {
        -(m.metric_inverse() * h)
    }
}

fn orthonormalize_oriented(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let d: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vs.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= d * b;
                }
            }
        }
        let n = vs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            vs[i].iter_mut().for_each(|a| *a /= n);
        }
    }
}

/// Integrates one path; see [`PathSpec`].
pub fn integrate_path(
    m: &ModelManifold,
    points: &[CriticalPoint],
    spec: &PathSpec<'_>,
    opts: &FlowOptions,
    origin_id: usize,
) -> Result<PathResult, FlowError> {
    let n = m.dim();
    let nt = spec.tangents.len();
    let nq = spec.n_quad;
    let dim = n + n * nt + nq;
    let mut y = vec![0.0; dim];
    y[..n].copy_from_slice(&spec.start);
    for (j, t) in spec.tangents.iter().enumerate() {
        y[n + j * n..n + (j + 1) * n].copy_from_slice(t);
    }
    let sign = if spec.backward { -1.0 } else { 1.0 };
    let integrand = spec.integrand;
    let rhs = |s: &[f64], d: &mut [f64]| {
        let p = &s[..n];
        m.flow_into(p, &mut d[..n]);
        if sign < 0.0 {
            d[..n].iter_mut().for_each(|v| *v = -*v);
        }
        let mut tangents: Vec<Vec<f64>> = Vec::new();
        if nt > 0 {
            let jac = flow_jacobian(m, p) * sign;
            for j in 0..nt {
                let v = DVector::from_column_slice(&s[n + j * n..n + (j + 1) * n]);
                let dv = &jac * &v;
                d[n + j * n..n + (j + 1) * n].copy_from_slice(dv.as_slice());
                if integrand.is_some() {
                    tangents.push(v.as_slice().to_vec());
                }
            }
        }
        if let Some(f) = integrand {
            let pdot = d[..n].to_vec();
            f(p, &pdot, &tangents, &mut d[n + n * nt..]);
        }
    };
    let mut tol = opts.tolerances();
    tol.error_dims = n + n * nt;
    let mut h_prev = m.h_lift(&spec.start);
    let mut terminal = Terminal::StepCap;
    let mut level_quad: Vec<Option<Vec<f64>>> = vec![None; spec.levels.len()];
    let mut samples = Vec::new();
    if spec.record_samples {
        samples.push(spec.start.clone());
    }
    let mut steps = 0usize;
    let mut monotone_err: Option<f64> = None;
    let mut left_start = spec.skip_radius <= 0.0;
    let mut prev_state = y.clone();
    let finish = ode::integrate(rhs, &mut y, &tol, |s, _tau| {
        steps += 1;
        let p = s[..n].to_vec();
        let h = m.h_lift(&p);
        let change = (h - h_prev) * sign;
        if change > 1e-12 * (1.0 + h.abs()) {
            monotone_err = Some(change);
            return Control::Stop;
        }
        let drop_prev = (spec.h_ref - h_prev) * sign;
        let drop = (spec.h_ref - h) * sign;
        for (j, lvl) in spec.levels.iter().enumerate() {
            if level_quad[j].is_none() && drop >= *lvl {
                let w = if drop > drop_prev { ((*lvl - drop_prev) / (drop - drop_prev)).clamp(0.0, 1.0) } else { 1.0 };
                let q: Vec<f64> = (0..nq)
                    .map(|i| {
                        let a = prev_state[n + n * nt + i];
                        let b = s[n + n * nt + i];
                        a + w * (b - a)
                    })
                    .collect();
                level_quad[j] = Some(q);
            }
        }
        h_prev = h;
        if spec.orthonormalize && nt > 0 {
            let mut ts: Vec<Vec<f64>> = (0..nt).map(|j| s[n + j * n..n + (j + 1) * n].to_vec()).collect();
            orthonormalize_oriented(&mut ts);
            for (j, t) in ts.iter().enumerate() {
                s[n + j * n..n + (j + 1) * n].copy_from_slice(t);
            }
        }
        prev_state.copy_from_slice(s);
        if spec.record_samples {
            samples.push(p.clone());
        }
        if !left_start {
            let d: f64 = p.iter().zip(&spec.start).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d > spec.skip_radius {
                left_start = true;
            }
        }
        if left_start {
            for c in points {
                let rule = (spec.rule)(c);
                if rule == CaptureRule::Ignore {
                    continue;
                }
                let disp = torus_displacement(&c.position, &p);
                let dist = disp.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dist < opts.capture_radius {
                    let deck: Vec<i64> =
                        (0..n).map(|i| ((p[i] - disp[i] - c.position[i]) / TWO_PI).round() as i64).collect();
                    if c.id == origin_id && deck.iter().all(|d| *d == 0) {
                        continue;
                    }
                    terminal = match rule {
                        CaptureRule::Capture => Terminal::Captured { id: c.id, deck },
                        _ => Terminal::Forbidden { id: c.id, deck },
                    };
                    return Control::Stop;
                }
            }
        }
        if drop > spec.max_h_change {
            terminal = Terminal::Escaped;
            return Control::Stop;
        }
        Control::Continue
    })
    .map_err(|e| FlowError::Integration { x: origin_id, source: e })?;
    if let Some(jump) = monotone_err {
        return Err(FlowError::NotMonotone { x: origin_id, jump });
    }
    if finish == Finish::StepCap {
        terminal = Terminal::StepCap;
    }
    let quad = y[n + n * nt..].to_vec();
    let level_quad = level_quad.into_iter().map(|q| q.unwrap_or_else(|| quad.clone())).collect();
    Ok(PathResult {
        terminal,
        end: y[..n].to_vec(),
        tangents: (0..nt).map(|j| y[n + j * n..n + (j + 1) * n].to_vec()).collect(),
        quad,
        level_quad,
        samples,
        steps,
    })
}

/// A run from a point of the launch sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRun {
    /// Angle on the unstable sphere (0 or pi for one-dimensional spheres).
    pub param: f64,
    pub direction: Vec<f64>,
    pub terminal: Terminal,
    pub end: Vec<f64>,
}

/// A connecting trajectory between lifted critical points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x: usize,
    pub y: usize,
    pub deck: Vec<i64>,
    pub param: f64,
    pub samples: Vec<Vec<f64>>,
    /// `h(x) - h(y + 2 pi deck)`.
    pub action: f64,
    pub sign: i32,
}

fn direction_on_circle(cp: &CriticalPoint, phi: f64) -> Vec<f64> {
    let u = cp.unstable_frame();
    (0..u[0].len()).map(|i| phi.cos() * u[0][i] + phi.sin() * u[1][i]).collect()
}

fn launch_direction(cp: &CriticalPoint, param: f64) -> Vec<f64> {
    match cp.index {
        1 => {
            let s = if param.cos() >= 0.0 { 1.0 } else { -1.0 };
            cp.unstable_frame()[0].iter().map(|v| s * v).collect()
        }
        2 => direction_on_circle(cp, param),
        _ => unreachable!("launch_direction is only used for index 1 and 2"),
    }
}

/// Shoots from `x` along its unstable sphere. Index 1 uses both directions;
/// index 2 uses `n_directions` angles offset by half a mesh cell. Runs are
/// captured only by points of index at most `index(x) - 2` (plus index
/// `index(x) - 1` when `x` has index 1), so they reach minima or escape.
pub fn shoot_unstable(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: &CriticalPoint,
    n_directions: usize,
    max_h_drop: f64,
    opts: &FlowOptions,
) -> Result<Vec<ShotRun>, FlowError> {
    let params: Vec<f64> = match x.index {
        0 => return Ok(vec![]),
        1 => vec![0.0, PI],
        2 => {
            if n_directions < 4 {
                return Err(FlowError::BadInput("need at least 2 directions per unstable dimension".into()));
            }
            (0..n_directions).map(|j| TWO_PI * (j as f64 + 0.5) / n_directions as f64).collect()
        }
        k => return Err(FlowError::Unsupported(format!("shooting from index {k} points"))),
    };
    params.par_iter().map(|&phi| shot(m, points, x, phi, max_h_drop, opts)).collect()
}

fn mesh_rule(x: &CriticalPoint) -> impl Fn(&CriticalPoint) -> CaptureRule + Sync + '_ {
    move |c: &CriticalPoint| {
        if x.index == 1 {
            if c.index == 0 {
                CaptureRule::Capture
            } else {
                CaptureRule::Forbid
            }
        } else if c.index + 2 <= x.index {
            CaptureRule::Capture
        } else if c.index >= x.index {
            CaptureRule::Forbid
        } else {
            CaptureRule::Ignore
        }
    }
}

fn shot(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: &CriticalPoint,
    param: f64,
    max_h_drop: f64,
    opts: &FlowOptions,
) -> Result<ShotRun, FlowError> {
    let dir = launch_direction(x, param);
    let r0 = opts.launch_radius(x);
    let start: Vec<f64> = x.position.iter().zip(&dir).map(|(p, d)| p + r0 * d).collect();
    let rule = mesh_rule(x);
    let spec = PathSpec {
        start,
        tangents: vec![],
        orthonormalize: false,
        backward: false,
        rule: &rule,
        h_ref: x.h_value,
        max_h_change: max_h_drop,
        integrand: None,
        n_quad: 0,
        levels: &[],
        record_samples: false,
        skip_radius: 2.0 * opts.capture_radius,
    };
    let res = integrate_path(m, points, &spec, opts, x.id)?;
    if let Terminal::Forbidden { id, .. } = &res.terminal {
        return Err(FlowError::TransversalityViolation {
            x: x.id,
            y: Some(*id),
            detail: format!("run at angle {param:.12} reached a point of index >= {}", x.index),
        });
    }
    Ok(ShotRun { param, direction: dir, terminal: res.terminal, end: res.end })
}

fn end_label_differs(a: &ShotRun, b: &ShotRun, jump_tol: f64) -> bool {
    match (&a.terminal, &b.terminal) {
        (Terminal::Captured { id: i, deck: d }, Terminal::Captured { id: j, deck: e }) => i != j || d != e,
        (Terminal::Captured { .. }, _) | (_, Terminal::Captured { .. }) => true,
        _ => {
            let d: f64 = a.end.iter().zip(&b.end).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            d > jump_tol
        }
    }
}

/// Runs the connecting trajectory from `param` with orientation transport.
fn connection_run(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: &CriticalPoint,
    param: f64,
    max_h_drop: f64,
    opts: &FlowOptions,
) -> Result<Option<Trajectory>, FlowError> {
    let dir = launch_direction(x, param);
    let r0 = opts.launch_radius(x);
    let start: Vec<f64> = x.position.iter().zip(&dir).map(|(p, d)| p + r0 * d).collect();
    let rule = |c: &CriticalPoint| {
        if c.index < x.index {
            CaptureRule::Capture
        } else {
            CaptureRule::Ignore
        }
    };
    let spec = PathSpec {
        start: start.clone(),
        tangents: x.unstable_frame().to_vec(),
        orthonormalize: true,
        backward: false,
        rule: &rule,
        h_ref: x.h_value,
        max_h_change: max_h_drop,
        integrand: None,
        n_quad: 0,
        levels: &[],
        record_samples: true,
        skip_radius: 2.0 * opts.capture_radius,
    };
    let res = integrate_path(m, points, &spec, opts, x.id)?;
    let (yid, deck) = match &res.terminal {
        Terminal::Captured { id, deck } if points[*id].index + 1 == x.index => (*id, deck.clone()),
        _ => return Ok(None),
    };
    let y = &points[yid];
    let xdot = m.flow(&res.end);
    let xn = xdot.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = m.dim();
    let k1 = x.index;
    let mut b = DMatrix::zeros(n, k1);
    for i in 0..n {
        b[(i, 0)] = xdot[i] / xn;
        for (j, w) in y.unstable_frame().iter().enumerate() {
            b[(i, j + 1)] = w[i];
        }
    }
    let t = DMatrix::from_fn(n, k1, |i, j| res.tangents[j][i]);
    let c = (b.transpose() * &b).try_inverse().ok_or_else(|| {
        FlowError::NumericalInstability(format!("degenerate comparison frame at critical point {yid}"))
    })? * b.transpose()
        * &t;
    let fit = (&b * &c - &t).norm();
    if fit > 0.2 {
        return Err(FlowError::NumericalInstability(format!(
            "transported frame from {} does not span the expected space at {yid} (misfit {fit:.3e})",
            x.id
        )));
    }
    let det = c.determinant();
    let sign = if det > 0.0 { 1 } else { -1 };
    let y_lift_h = y.h_value + m.deck_action(&deck);
    Ok(Some(Trajectory {
        x: x.id,
        y: yid,
        deck,
        param,
        samples: res.samples,
        action: x.h_value - y_lift_h,
        sign,
    }))
}

/// All connecting trajectories leaving `x` with action at most `action_bound`.
pub fn connections_from(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: &CriticalPoint,
    action_bound: f64,
    n_directions: usize,
    opts: &FlowOptions,
) -> Result<Vec<Trajectory>, FlowError> {
    let max_drop = action_bound + opts.action_margin;
    match x.index {
        0 => Ok(vec![]),
        1 => {
            let mut out = Vec::new();
            for param in [0.0, PI] {
                if let Some(t) = connection_run(m, points, x, param, max_drop, opts)? {
                    if t.action <= action_bound {
                        out.push(t);
                    }
                }
            }
            Ok(out)
        }
        2 => {
            let runs = shoot_unstable(m, points, x, n_directions, max_drop, opts)?;
            let mut brackets = Vec::new();
            for j in 0..runs.len() {
                let a = &runs[j];
                let b = &runs[(j + 1) % runs.len()];
                if end_label_differs(a, b, opts.jump_tol) {
                    let hi = if j + 1 == runs.len() { b.param + TWO_PI } else { b.param };
                    brackets.push((a.clone(), ShotRun { param: hi, ..b.clone() }));
                }
            }
            let found: Vec<Vec<f64>> = brackets
                .par_iter()
                .map(|(a, b)| bisect_jumps(m, points, x, a.clone(), b.clone(), max_drop, opts))
                .collect::<Result<_, _>>()?;
            let mut params: Vec<f64> = found.into_iter().flatten().map(|p| p.rem_euclid(TWO_PI)).collect();
            params.sort_by(f64::total_cmp);
            params.dedup_by(|a, b| (*a - *b).abs() < 1e3 * opts.bisection_tol);
            let trajs: Vec<Option<Trajectory>> = params
                .par_iter()
                .map(|&p| {
                    let t = connection_run(m, points, x, p, max_drop, opts)?;
                    match t {
                        Some(t) => Ok(Some(t)),
                        None => Err(FlowError::TransversalityViolation {
                            x: x.id,
                            y: None,
                            detail: format!(
                                "capture outcome jumps at angle {p:.12} but no isolated connection to an index-{} point",
                                x.index - 1
                            ),
                        }),
                    }
                })
                .collect::<Result<_, _>>()?;
            Ok(trajs.into_iter().flatten().filter(|t| t.action <= action_bound).collect())
        }
        k => Err(FlowError::Unsupported(format!("connection search from index {k} points"))),
    }
}

/// Recursive bisection between runs with different outcomes. Returns the
/// angles at which the outcome jumps.
fn bisect_jumps(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: &CriticalPoint,
    a: ShotRun,
    b: ShotRun,
    max_drop: f64,
    opts: &FlowOptions,
) -> Result<Vec<f64>, FlowError> {
    let mut out = Vec::new();
    let mut stack = vec![(a, b)];
    while let Some((a, b)) = stack.pop() {
        if b.param - a.param <= opts.bisection_tol {
            out.push(0.5 * (a.param + b.param));
            continue;
        }
        let mid = shot(m, points, x, 0.5 * (a.param + b.param), max_drop, opts)?;
        if end_label_differs(&a, &mid, opts.jump_tol) {
            stack.push((a.clone(), mid.clone()));
        }
        if end_label_differs(&mid, &b, opts.jump_tol) {
            stack.push((mid, b));
        }
    }
    Ok(out)
}

/// Aggregated count for one `(x, y, deck)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceEntry {
    pub x: usize,
    pub y: usize,
    pub deck: Vec<i64>,
    pub count: i64,
    /// Action shared by all trajectories of this entry.
    pub action: f64,
}

/// Signed trajectory counts up to an action bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceTable {
    pub entries: Vec<IncidenceEntry>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub action_bound: f64,
    /// Unstable frame of each critical point, by id.
    pub orientations: Vec<Vec<Vec<f64>>>,
    /// Pairs `(x, y)` with `index(x) = index(y) + 1` that were searched.
    pub pairs: Vec<(usize, usize)>,
    pub n_directions: usize,
    /// Whether doubling the mesh left every entry unchanged.
    pub stabilized: bool,
    pub manifold_hash: String,
}

/// Summary of a trajectory kept in the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub x: usize,
    pub y: usize,
    pub deck: Vec<i64>,
    pub param: f64,
    pub action: f64,
    pub sign: i32,
}

impl IncidenceTable {
    pub fn count(&self, x: usize, y: usize, deck: &[i64]) -> i64 {
        self.entries.iter().find(|e| e.x == x && e.y == y && e.deck == deck).map(|e| e.count).unwrap_or(0)
    }

    pub fn pair_entries(&self, x: usize, y: usize) -> Vec<&IncidenceEntry> {
        self.entries.iter().filter(|e| e.x == x && e.y == y).collect()
    }

    /// Cache key from the manifold hash, bound, and mesh parameters.
    pub fn cache_key(manifold_hash: &str, action_bound: f64, opts: &FlowOptions) -> String {
        let text = format!("{manifold_hash}|{action_bound:e}|{}", serde_json::to_string(opts).expect("serializable"));
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn aggregate(trajs: &[Trajectory]) -> Vec<IncidenceEntry> {
    let mut map: BTreeMap<(usize, usize, Vec<i64>), (i64, f64)> = BTreeMap::new();
    for t in trajs {
        let e = map.entry((t.x, t.y, t.deck.clone())).or_insert((0, t.action));
        e.0 += t.sign as i64;
    }
    map.into_iter()
        .filter(|(_, (c, _))| *c != 0)
        .map(|((x, y, deck), (count, action))| IncidenceEntry { x, y, deck, count, action })
        .collect()
}

fn table_at(
    m: &ModelManifold,
    points: &[CriticalPoint],
    action_bound: f64,
    n_directions: usize,
    opts: &FlowOptions,
) -> Result<(Vec<IncidenceEntry>, Vec<Trajectory>), FlowError> {
    let per_point: Vec<Vec<Trajectory>> = points
        .iter()
        .filter(|c| c.index >= 1)
        .map(|c| connections_from(m, points, c, action_bound, n_directions, opts))
        .collect::<Result<_, _>>()?;
    let mut trajs: Vec<Trajectory> = per_point.into_iter().flatten().collect();
    trajs.sort_by(|a, b| (a.x, a.y, &a.deck).cmp(&(b.x, b.y, &b.deck)).then(a.param.total_cmp(&b.param)));
    Ok((aggregate(&trajs), trajs))
}

/// Counts all connecting trajectories with action at most `action_bound`,
/// doubling the shooting mesh until the counts stop changing.
pub fn incidence_table(
    m: &ModelManifold,
    points: &[CriticalPoint],
    action_bound: f64,
    opts: &FlowOptions,
) -> Result<IncidenceTable, FlowError> {
    if let Some(c) = points.iter().find(|c| c.index > 2) {
        return Err(FlowError::Unsupported(format!(
            "trajectory counting from index {} points (critical point {})",
            c.index, c.id
        )));
    }
    let mut n_dir = opts.n_directions;
    let (mut entries, mut trajs) = table_at(m, points, action_bound, n_dir, opts)?;
    let mut stabilized = !points.iter().any(|c| c.index == 2);
    let mut refinements = 0;
    while !stabilized && refinements <= opts.max_refinements {
        let (e2, t2) = table_at(m, points, action_bound, 2 * n_dir, opts)?;
        n_dir *= 2;
        refinements += 1;
        stabilized = e2 == entries;
        entries = e2;
        trajs = t2;
    }
    let pairs = points
        .iter()
        .flat_map(|x| points.iter().filter(move |y| y.index + 1 == x.index).map(move |y| (x.id, y.id)))
        .collect();
    Ok(IncidenceTable {
        entries,
        trajectories: trajs
            .iter()
            .map(|t| TrajectoryRecord {
                x: t.x,
                y: t.y,
                deck: t.deck.clone(),
                param: t.param,
                action: t.action,
                sign: t.sign,
            })
            .collect(),
        action_bound,
        orientations: points.iter().map(|c| c.unstable_frame().to_vec()).collect(),
        pairs,
        n_directions: n_dir,
        stabilized,
        manifold_hash: m.content_hash(),
    })
}

/// Trajectories from `x` to `y` up to the bound, aggregated by deck.
pub fn count_connecting_orbits(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: usize,
    y: usize,
    action_bound: f64,
    opts: &FlowOptions,
) -> Result<(Vec<IncidenceEntry>, Vec<Trajectory>), FlowError> {
    let (cx, cy) = (&points[x], &points[y]);
    if cx.index != cy.index + 1 {
        return Err(FlowError::BadInput(format!("index({x}) = {} is not index({y}) + 1", cx.index)));
    }
    let trajs: Vec<Trajectory> = connections_from(m, points, cx, action_bound, opts.n_directions, opts)?
        .into_iter()
        .filter(|t| t.y == y)
        .collect();
    Ok((aggregate(&trajs), trajs))
}

/// A grid sample attributed to the unstable manifold of a top-index point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinSample {
    /// Grid node index (row-major, first axis fastest).
    pub node: usize,
    /// The sampled point (the node, or a small perturbation of it).
    pub point: Vec<f64>,
    pub target: usize,
    pub deck: Vec<i64>,
    /// `h(point) - h(target lift)`, non-positive.
    pub h_rel: f64,
    /// Fraction of the node's cell carried by this sample.
    pub weight: f64,
}

/// Classifies the nodes of a `grid_n^n` grid by the top-index critical
/// lift their backward flow converges to. Nodes on lower-dimensional
/// unstable manifolds are split into two perturbed half-weight samples.
pub fn classify_top_basins(
    m: &ModelManifold,
    points: &[CriticalPoint],
    grid_n: usize,
    max_h_rise: f64,
    opts: &FlowOptions,
) -> Result<Vec<BasinSample>, FlowError> {
    let n = m.dim();
    let total = grid_n.pow(n as u32);
    let step = TWO_PI / grid_n as f64;
    let shift: Vec<f64> = (0..n).map(|i| ((i + 2) as f64).sqrt().fract() + 0.1).collect();
    let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
    let shift: Vec<f64> = shift.iter().map(|v| v / norm).collect();
    let per_node: Vec<Vec<BasinSample>> = (0..total)
        .into_par_iter()
        .map(|node| {
            let mut rem = node;
            let p: Vec<f64> = (0..n)
                .map(|_| {
                    let i = rem % grid_n;
                    rem /= grid_n;
                    i as f64 * step
                })
                .collect();
            match backward_target(m, points, &p, max_h_rise, true, opts)? {
                Backward::Top(id, deck, h_rel) => {
                    Ok(vec![BasinSample { node, point: p, target: id, deck, h_rel, weight: 1.0 }])
                }
                Backward::None => Ok(vec![]),
                Backward::Lower => {
                    let mut out = Vec::new();
                    for s in [1.0, -1.0] {
                        let q: Vec<f64> = p.iter().zip(&shift).map(|(a, b)| a + s * 1e-6 * b).collect();
                        if let Backward::Top(id, deck, h_rel) = backward_target(m, points, &q, max_h_rise, false, opts)? {
                            out.push(BasinSample { node, point: q, target: id, deck, h_rel, weight: 0.5 });
                        }
                    }
                    Ok(out)
                }
            }
        })
        .collect::<Result<_, FlowError>>()?;
    Ok(per_node.into_iter().flatten().collect())
}

enum Backward {
    Top(usize, Vec<i64>, f64),
    Lower,
    None,
}

fn backward_target(
    m: &ModelManifold,
    points: &[CriticalPoint],
    p: &[f64],
    max_h_rise: f64,
    strict: bool,
    opts: &FlowOptions,
) -> Result<Backward, FlowError> {
    let n = m.dim();
    // Perturbed restarts pass close to lower points without stopping there.
    let lower = if strict { CaptureRule::Forbid } else { CaptureRule::Ignore };
    for c in points.iter().filter(|_| strict) {
        if c.index < n && torus_displacement(&c.position, p).iter().map(|v| v * v).sum::<f64>().sqrt() < opts.capture_radius
        {
            return Ok(Backward::Lower);
        }
    }
    let rule = |c: &CriticalPoint| if c.index == n { CaptureRule::Capture } else { lower };
    let h0 = m.h_lift(p);
    let spec = PathSpec {
        start: p.to_vec(),
        tangents: vec![],
        orthonormalize: false,
        backward: true,
        rule: &rule,
        h_ref: h0,
        max_h_change: max_h_rise,
        integrand: None,
        n_quad: 0,
        levels: &[],
        record_samples: false,
        skip_radius: 0.0,
    };
    let mut loose = *opts;
    loose.rtol = opts.rtol.max(1e-9);
    loose.atol = opts.atol.max(1e-11);
    let res = integrate_path(m, points, &spec, &loose, usize::MAX)?;
    Ok(match res.terminal {
        Terminal::Captured { id, deck } => {
            let h_top = points[id].h_value + m.deck_action(&deck);
            Backward::Top(id, deck, h0 - h_top)
        }
        Terminal::Forbidden { .. } => Backward::Lower,
        Terminal::Escaped | Terminal::StepCap => Backward::None,
    })
}

/// Parameters of [`estimate_rho`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoOptions {
    pub a_grid: Vec<f64>,
    /// Exhaustion levels: the region `h^x >= -radius`.
    pub radius_grid: Vec<f64>,
    /// Relative change allowed across the last three radii.
    pub stabilization_tol: f64,
    /// Points per angle on unstable spheres of dimension >= 1.
    pub sphere_resolution: usize,
    /// Grid per axis for top-index unstable manifolds.
    pub top_grid: usize,
}

impl Default for RhoOptions {
    fn default() -> Self {
        RhoOptions {
            a_grid: vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8],
            radius_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 16.0],
            stabilization_tol: 0.005,
            sphere_resolution: 32,
            top_grid: 64,
        }
    }
}

/// Partial integrals of `exp(a h^x)` over exhausting pieces of `W^-_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub x: usize,
    pub index: usize,
    pub a_grid: Vec<f64>,
    pub radius_grid: Vec<f64>,
    /// `integrals[i][j]` for `a_grid[i]` and `radius_grid[j]`.
    pub integrals: Vec<Vec<f64>>,
    pub stabilized: Vec<bool>,
    /// Smallest stabilizing `a`, or infinity when none does.
    pub rho_hat: f64,
}

fn hyperspherical(angles: &[f64], k: usize) -> Vec<f64> {
    let mut xi = vec![0.0; k];
    let mut s = 1.0;
    for i in 0..k - 1 {
        xi[i] = s * angles[i].cos();
        s *= angles[i].sin();
    }
    xi[k - 1] = s;
    xi
}

fn unit_ball_volume(k: usize) -> f64 {
    match k {
        0 => 1.0,
        1 => 2.0,
        _ => TWO_PI / k as f64 * unit_ball_volume(k - 2),
    }
}

/// Estimates the growth exponent of `W^-_x` volumes (see [`RhoEstimate`]).
pub fn estimate_rho(
    m: &ModelManifold,
    points: &[CriticalPoint],
    x: &CriticalPoint,
    ropts: &RhoOptions,
    opts: &FlowOptions,
) -> Result<RhoEstimate, FlowError> {
    if x.index == 0 {
        return Err(FlowError::BadInput("estimate_rho needs a point of index >= 1".into()));
    }
    if ropts.a_grid.iter().any(|a| *a < 0.0) || ropts.radius_grid.len() < 3 {
        return Err(FlowError::BadInput("a_grid must be non-negative and radius_grid needs 3 levels".into()));
    }
    let mut a_grid = ropts.a_grid.clone();
    a_grid.sort_by(f64::total_cmp);
    let mut radii = ropts.radius_grid.clone();
    radii.sort_by(f64::total_cmp);
    let r_max = *radii.last().expect("nonempty");
    let na = a_grid.len();
    let nr = radii.len();
    let n = m.dim();
    let g = m.metric();

    let mut integrals = vec![vec![0.0; nr]; na];
    if x.index == n {
        let samples = classify_top_basins(m, points, ropts.top_grid, r_max + opts.action_margin, opts)?;
        let det_g = g.determinant().sqrt();
        let cell = (TWO_PI / ropts.top_grid as f64).powi(n as i32) * det_g;
        for s in samples.iter().filter(|s| s.target == x.id) {
            for (i, a) in a_grid.iter().enumerate() {
                let w = s.weight * cell * (a * s.h_rel).exp();
                for (j, r) in radii.iter().enumerate() {
                    if s.h_rel >= -r {
                        integrals[i][j] += w;
                    }
                }
            }
        }
    } else {
        let k = x.index;
        let r0 = opts.launch_radius(x);
        let frame = x.unstable_frame().to_vec();
        // Sphere points, their angle weights, and initial tangent vectors.
        let dirs: Vec<(Vec<f64>, f64, Vec<Vec<f64>>)> = if k == 1 {
            vec![(frame[0].clone(), 1.0, vec![]), (frame[0].iter().map(|v| -v).collect(), 1.0, vec![])]
        } else {
            let res = ropts.sphere_resolution.max(4);
            let mut counts = vec![res; k - 1];
            counts[k - 2] = 2 * res;
            let total: usize = counts.iter().product();
            (0..total)
                .map(|mut idx| {
                    let mut angles = Vec::with_capacity(k - 1);
                    let mut weight = 1.0;
                    for (j, c) in counts.iter().enumerate() {
                        let i = idx % c;
                        idx /= c;
                        let span = if j == k - 2 { TWO_PI } else { PI };
                        angles.push((i as f64 + 0.5) * span / *c as f64);
                        weight *= span / *c as f64;
                    }
                    let to_ambient = |xi: &[f64]| -> Vec<f64> {
                        (0..n).map(|i| xi.iter().zip(&frame).map(|(c, u)| c * u[i]).sum()).collect()
                    };
                    let xi = hyperspherical(&angles, k);
                    let tangents = (0..k - 1)
                        .map(|j| {
                            let eps = 1e-6;
                            let mut ap = angles.clone();
                            let mut am = angles.clone();
                            ap[j] += eps;
                            am[j] -= eps;
                            let d: Vec<f64> = hyperspherical(&ap, k)
                                .iter()
                                .zip(hyperspherical(&am, k))
                                .map(|(p, q)| (p - q) / (2.0 * eps))
                                .collect();
                            to_ambient(&d).iter().map(|v| v * r0).collect()
                        })
                        .collect();
                    (to_ambient(&xi), weight, tangents)
                })
                .collect()
        };
        let gm = g.clone();
        let a_vals = a_grid.clone();
        let h_ref = x.h_value;
        let integrand = move |p: &[f64], pdot: &[f64], tangents: &[Vec<f64>], out: &mut [f64]| {
            let kk = tangents.len() + 1;
            let mut mat = DMatrix::zeros(n, kk);
            for (j, t) in tangents.iter().enumerate() {
                for i in 0..n {
                    mat[(i, j)] = t[i];
                }
            }
            for i in 0..n {
                mat[(i, kk - 1)] = pdot[i];
            }
            let gram = mat.transpose() * &gm * &mat;
            let jac = gram.determinant().max(0.0).sqrt();
            let hx = m.h_lift(p) - h_ref;
            for (o, a) in out.iter_mut().zip(&a_vals) {
                *o = (a * hx).exp() * jac;
            }
        };
        let rule = |c: &CriticalPoint| if c.index == 0 { CaptureRule::Capture } else { CaptureRule::Ignore };
        let per_dir: Vec<Vec<Vec<f64>>> = dirs
            .par_iter()
            .map(|(dir, weight, tangents)| {
                let start: Vec<f64> = x.position.iter().zip(dir).map(|(p, d)| p + r0 * d).collect();
                let spec = PathSpec {
                    start,
                    tangents: tangents.clone(),
                    orthonormalize: false,
                    backward: false,
                    rule: &rule,
                    h_ref,
                    max_h_change: r_max,
                    integrand: Some(&integrand),
                    n_quad: na,
                    levels: &radii,
                    record_samples: false,
                    skip_radius: 2.0 * opts.capture_radius,
                };
                let mut loose = *opts;
                loose.rtol = opts.rtol.max(1e-9);
                loose.atol = opts.atol.max(1e-11);
                let res = integrate_path(m, points, &spec, &loose, x.id)?;
                Ok(res.level_quad.iter().map(|q| q.iter().map(|v| v * weight).collect()).collect())
            })
            .collect::<Result<_, FlowError>>()?;
        let ball = unit_ball_volume(k) * r0.powi(k as i32);
        for i in 0..na {
            for j in 0..nr {
                integrals[i][j] = ball + per_dir.iter().map(|d| d[j][i]).sum::<f64>();
            }
        }
    }
    let mut stabilized = Vec::with_capacity(na);
    for (i, row) in integrals.iter().enumerate() {
        for j in 1..nr {
            if row[j] < row[j - 1] * (1.0 - 1e-9) - 1e-300 {
                return Err(FlowError::NumericalInstability(format!(
                    "exhaustion not monotone at a = {}, radius {} -> {}",
                    a_grid[i],
                    radii[j - 1],
                    radii[j]
                )));
            }
        }
        let tol = ropts.stabilization_tol;
        let ok = (nr - 2..nr).all(|j| (row[j] - row[j - 1]).abs() <= tol * row[j].abs());
        stabilized.push(ok && row[nr - 1].is_finite());
    }
    let rho_hat = a_grid.iter().zip(&stabilized).find(|(_, s)| **s).map(|(a, _)| *a).unwrap_or(f64::INFINITY);
    Ok(RhoEstimate { x: x.id, index: x.index, a_grid, radius_grid: radii, integrals, stabilized, rho_hat })
}
