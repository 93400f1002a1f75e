//! Novikov cochain complexes built from incidence tables.
//!
//! `boundary[q]` maps degree `q` to `q + 1`: rows are the critical points of
//! index `q + 1`, columns those of index `q`. Each critical point `x` is
//! based at its section lift `sigma(x)`, whose `h` value lies in `[0, P)`.
//! Entry `(x, y)` stores `sum I(sigma x, y~) delta_n` with the lattice point
//! `n` chosen so that `action(n) = H(sigma x, y~) - H0(x, y)`, where
//! `H0(x, y) = h(sigma x) - h(sigma y)`. Specializing at `s` multiplies the
//! evaluated entry by `exp(-s H0)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_flow::IncidenceTable;
use crate::model_manifold::{CriticalPoint, ModelManifold};
use crate::novikov_ring::{Lattice, RingElement, RingError, SerializedElement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComplexError {
    #[error("incidence table does not cover the pair ({0}, {1})")]
    MissingPair(usize, usize),
    #[error("incidence table was computed for a different manifold")]
    ManifoldMismatch,
    #[error(
        "composition d^{q_plus_1} o d^{q} is nonzero at ({x}, {z}), lattice point {point:?} \
         (action {action:.6}, coefficient {coefficient}) below bound {bound:.6}"
    )]
    DSquared {
        q: usize,
        q_plus_1: usize,
        x: usize,
        z: usize,
        point: Vec<i64>,
        action: f64,
        coefficient: String,
        bound: f64,
    },
    #[error(transparent)]
    Ring(#[from] RingError),
}

/// A critical point used as a generator, based at its section lift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: usize,
    pub index: usize,
    pub section_deck: Vec<i64>,
    pub section_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NovikovComplex {
    pub lattice: Lattice,
    /// Generators of each degree `0..=n`, ordered by id.
    pub generators: Vec<Vec<Generator>>,
    /// `boundary[q][row][col]`, rows in degree `q + 1`, columns in degree `q`.
    pub boundary: Vec<Vec<Vec<RingElement>>>,
    pub action_bound: f64,
}

impl NovikovComplex {
    pub fn dim(&self, q: usize) -> usize {
        self.generators.get(q).map_or(0, |g| g.len())
    }

    pub fn top_degree(&self) -> usize {
        self.generators.len().saturating_sub(1)
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.generators.iter().enumerate().map(|(q, g)| if q % 2 == 0 { g.len() as i64 } else { -(g.len() as i64) }).sum()
    }

    /// `h(sigma x) - h(sigma y)` for generators of degrees `q + 1` and `q`.
    pub fn base_action(&self, q: usize, row: usize, col: usize) -> f64 {
        self.generators[q + 1][row].section_h - self.generators[q][col].section_h
    }

    pub fn to_serialized(&self) -> SerializedComplex {
        SerializedComplex {
            periods: self.lattice.periods().to_vec(),
            generators: self.generators.clone(),
            boundary: self
                .boundary
                .iter()
                .map(|m| m.iter().map(|row| row.iter().map(|e| e.to_serialized()).collect()).collect())
                .collect(),
            action_bound: self.action_bound,
        }
    }

    pub fn from_serialized(s: &SerializedComplex) -> Result<Self, ComplexError> {
        let lattice = Lattice::new(s.periods.clone())?;
        let boundary = s
            .boundary
            .iter()
            .map(|m| {
                m.iter()
                    .map(|row| row.iter().map(RingElement::from_serialized).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NovikovComplex { lattice, generators: s.generators.clone(), boundary, action_bound: s.action_bound })
    }

    /// Plain-text listing of generators and boundary entries.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "lattice periods {:?}", self.lattice.periods());
        let _ = writeln!(out, "action bound {}", self.action_bound);
        for (q, g) in self.generators.iter().enumerate() {
            let ids: Vec<String> = g.iter().map(|x| x.id.to_string()).collect();
            let _ = writeln!(out, "C^{q}: [{}]", ids.join(", "));
        }
        for (q, m) in self.boundary.iter().enumerate() {
            let _ = writeln!(out, "d^{q}: {} x {}", self.dim(q + 1), self.dim(q));
            for (r, row) in m.iter().enumerate() {
                for (c, e) in row.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "  ({}, {}) H0={:.12} : {}",
                        self.generators[q + 1][r].id,
                        self.generators[q][c].id,
                        self.base_action(q, r, c),
                        e
                    );
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedComplex {
    pub periods: Vec<f64>,
    pub generators: Vec<Vec<Generator>>,
    pub boundary: Vec<Vec<Vec<SerializedElement>>>,
    pub action_bound: f64,
}

/// Builds the truncated complex from an incidence table.
pub fn assemble(table: &IncidenceTable, m: &ModelManifold, points: &[CriticalPoint]) -> Result<NovikovComplex, ComplexError> {
    if table.manifold_hash != m.content_hash() {
        return Err(ComplexError::ManifoldMismatch);
    }
    let n = m.dim();
    let lattice = m.lattice().clone();
    let mut generators: Vec<Vec<Generator>> = vec![Vec::new(); n + 1];
    let mut sorted: Vec<&CriticalPoint> = points.iter().collect();
    sorted.sort_by_key(|c| c.id);
    for c in sorted {
        let deck = m.section_deck(c);
        let section_h = c.h_value + m.deck_action(&deck);
        generators[c.index].push(Generator { id: c.id, index: c.index, section_deck: deck, section_h });
    }
    if points.is_empty() {
        generators.iter_mut().for_each(|g| g.clear());
    }
    for q in 0..n {
        for x in &generators[q + 1] {
            for y in &generators[q] {
                if !table.pairs.contains(&(x.id, y.id)) {
                    return Err(ComplexError::MissingPair(x.id, y.id));
                }
            }
        }
    }
    let r = table.action_bound;
    let mut boundary = Vec::with_capacity(n);
    for q in 0..n {
        let mut mat = Vec::with_capacity(generators[q + 1].len());
        for x in &generators[q + 1] {
            let mut row = Vec::with_capacity(generators[q].len());
            for y in &generators[q] {
                let h0 = x.section_h - y.section_h;
                let mut terms: BTreeMap<Vec<i64>, i64> = BTreeMap::new();
                for e in table.pair_entries(x.id, y.id) {
                    // Deck of the target lift relative to sigma(y), seen from sigma(x).
                    let g: Vec<i64> = (0..n).map(|i| e.deck[i] + x.section_deck[i] - y.section_deck[i]).collect();
                    let point: Vec<i64> = m.deck_to_lattice(&g).iter().map(|v| -v).collect();
                    *terms.entry(point).or_insert(0) += e.count;
                }
                row.push(RingElement::from_integers(&lattice, terms, r - h0)?);
            }
            mat.push(row);
        }
        boundary.push(mat);
    }
    Ok(NovikovComplex { lattice, generators, boundary, action_bound: r })
}

/// Outcome of checking `d^(q+1) o d^q = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DSquaredReport {
    /// Per composition: the smallest propagated bound over its entries. Nothing
    /// is claimed about terms with larger action.
    pub bounds: Vec<f64>,
    /// Largest coefficient magnitude below the bound (always 0 on success).
    pub max_violation: f64,
    /// Terms of the raw products above the propagated bound (not checked).
    pub terms_above_bound: usize,
    pub compositions_checked: usize,
}

/// Composes consecutive boundaries by exact convolution and fails on any
/// nonzero coefficient below the propagated action bound.
pub fn verify_d_squared(c: &NovikovComplex) -> Result<DSquaredReport, ComplexError> {
    let mut bounds = Vec::new();
    let mut above = 0usize;
    let mut checked = 0usize;
    for q in 0..c.boundary.len().saturating_sub(1) {
        let (d0, d1) = (&c.boundary[q], &c.boundary[q + 1]);
        let rows = c.dim(q + 2);
        let cols = c.dim(q);
        let mid = c.dim(q + 1);
        let cells: Vec<(usize, usize)> = (0..rows).flat_map(|x| (0..cols).map(move |z| (x, z))).collect();
        let composed: Vec<(usize, usize, RingElement)> = cells
            .par_iter()
            .map(|&(x, z)| {
                let mut acc = RingElement::zero(&c.lattice, f64::INFINITY);
                for y in 0..mid {
                    acc = acc.add(&d1[x][y].convolve(&d0[y][z])?)?;
                }
                Ok((x, z, acc))
            })
            .collect::<Result<_, RingError>>()?;
        let mut bound = f64::INFINITY;
        for (x, z, e) in composed {
            checked += 1;
            let b = e.action_bound();
            bound = bound.min(b);
            for (p, coef) in e.terms() {
                let a = c.lattice.action(p);
                if a <= b && !coef.is_zero() {
                    return Err(ComplexError::DSquared {
                        q,
                        q_plus_1: q + 1,
                        x: c.generators[q + 2][x].id,
                        z: c.generators[q][z].id,
                        point: p.clone(),
                        action: a,
                        coefficient: coef.to_string(),
                        bound: b,
                    });
                }
                above += 1;
            }
        }
        bounds.push(bound);
    }
    Ok(DSquaredReport { bounds, max_violation: 0.0, terms_above_bound: above, compositions_checked: checked })
}

/// Boundary matrices evaluated at a complex `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecializedComplex {
    pub s: Complex64,
    pub dims: Vec<usize>,
    pub matrices: Vec<DMatrix<Complex64>>,
    pub warnings: Vec<String>,
}

/// Evaluates every boundary entry at `s`. With `rho_hat` given, `Re s` at or
/// below it produces a warning.
pub fn specialize(c: &NovikovComplex, s: Complex64, rho_hat: Option<f64>) -> SpecializedComplex {
    let mut warnings = Vec::new();
    if let Some(rho) = rho_hat {
        if s.re <= rho {
            warnings.push(format!("Re(s) = {} is not above the estimated abscissa {rho}", s.re));
        }
    }
    let dims: Vec<usize> = (0..c.generators.len()).map(|q| c.dim(q)).collect();
    let matrices = (0..c.boundary.len())
        .map(|q| {
            DMatrix::from_fn(c.dim(q + 1), c.dim(q), |r, col| {
                (-s * c.base_action(q, r, col)).exp() * c.boundary[q][r][col].evaluate(s)
            })
        })
        .collect();
    SpecializedComplex { s, dims, matrices, warnings }
}

impl SpecializedComplex {
    /// Largest entry of `M^(q+1) M^q` relative to the product of norms.
    pub fn max_composition_residual(&self) -> f64 {
        self.matrices
            .windows(2)
            .map(|w| {
                let p = &w[1] * &w[0];
                let scale = (w[1].norm() * w[0].norm()).max(f64::MIN_POSITIVE);
                p.iter().map(|z| z.norm()).fold(0.0, f64::max) / scale
            })
            .fold(0.0, f64::max)
    }

    pub fn to_serialized(&self) -> SerializedSpecialized {
        SerializedSpecialized {
            s: (self.s.re, self.s.im),
            dims: self.dims.clone(),
            matrices: self
                .matrices
                .iter()
                .map(|m| (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| (m[(r, c)].re, m[(r, c)].im)).collect()).collect())
                .collect(),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedSpecialized {
    pub s: (f64, f64),
    pub dims: Vec<usize>,
    /// Row-major `(re, im)` pairs.
    pub matrices: Vec<Vec<Vec<(f64, f64)>>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomologyReport {
    pub betti: Vec<usize>,
    pub ranks: Vec<usize>,
    pub singular_values: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Relative threshold for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-8;

pub fn homology_ranks(sc: &SpecializedComplex) -> HomologyReport {
    let mut ranks = Vec::new();
    let mut svs = Vec::new();
    let mut warnings = Vec::new();
    for (q, m) in sc.matrices.iter().enumerate() {
        if m.nrows() == 0 || m.ncols() == 0 {
            ranks.push(0);
            svs.push(vec![]);
            continue;
        }
        let mut sv: Vec<f64> = m.clone().singular_values().iter().cloned().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let smax = sv[0];
        let thr = RANK_THRESHOLD * smax;
        let rank = if smax == 0.0 { 0 } else { sv.iter().filter(|v| **v > thr).count() };
        if smax > 0.0 {
            for v in &sv {
                if *v > thr / 10.0 && *v < thr * 10.0 {
                    warnings.push(format!("d^{q}: singular value {v:.3e} is within 10x of the rank threshold {thr:.3e}"));
                }
            }
        }
        ranks.push(rank);
        svs.push(sv);
    }
    let betti = (0..sc.dims.len())
        .map(|q| {
            let out = ranks.get(q).copied().unwrap_or(0);
            let inc = if q > 0 { ranks.get(q - 1).copied().unwrap_or(0) } else { 0 };
            sc.dims[q] - out - inc
        })
        .collect();
    HomologyReport { betti, ranks, singular_values: svs, warnings }
}

/// Integer boundary matrix in degree `q` after collapsing the ring (all
/// coefficients summed); meaningful for exact forms.
pub fn collapsed_counts(c: &NovikovComplex, q: usize) -> Vec<Vec<i64>> {
    c.boundary[q]
        .iter()
        .map(|row| row.iter().map(|e| e.terms().values().map(|v| v.to_integer().to_i64().unwrap_or(0)).sum()).collect())
        .collect()
}
