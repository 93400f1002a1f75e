//! Truncated Novikov ring elements over a period lattice, their Dirichlet
//! series, and the two estimators that work on those series.
//!
//! A [`Lattice`] is `Z^r` together with positive periods; the action of a
//! point `n` is `sum_i periods[i] * n[i]`. A [`RingElement`] is a finitely
//! supported map from lattice points to exact rationals plus an
//! `action_bound`: coefficients at actions above the bound are unknown.
//!
//! Invariants:
//! - no stored coefficient is zero;
//! - every stored point has the lattice rank;
//! - operations never claim knowledge above the propagated bound.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two actions closer than this are treated as equal.
pub const ACTION_COLLISION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("lattice periods must be finite and positive, got {0:?}")]
    BadPeriods(Vec<f64>),
    #[error("lattice mismatch: {0:?} vs {1:?}")]
    LatticeMismatch(Vec<f64>, Vec<f64>),
    #[error("lattice point {point:?} has rank {got}, expected {expected}")]
    RankMismatch { point: Vec<i64>, got: usize, expected: usize },
    #[error("distinct lattice points {a:?} and {b:?} share action {action}")]
    ActionCollision { a: Vec<i64>, b: Vec<i64>, action: f64 },
    #[error("insufficient data: need at least {needed} exponents, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("exponents must be strictly increasing with gap >= {ACTION_COLLISION_TOL}")]
    NonIncreasingExponents,
    #[error("least-squares system is ill-conditioned (condition {0:.3e})")]
    IllConditioned(f64),
    #[error("no integer fit: rounding distance {distance:.3e}, residual {residual:.3e}")]
    NoIntegerFit { distance: f64, residual: f64 },
    #[error("bad fit input: {0}")]
    BadFitInput(String),
    #[error("malformed serialized element: {0}")]
    Malformed(String),
}

/// `Z^r` with positive periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    periods: Vec<f64>,
}

impl Lattice {
    pub fn new(periods: Vec<f64>) -> Result<Self, RingError> {
        if periods.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(RingError::BadPeriods(periods));
        }
        Ok(Lattice { periods })
    }

    /// The rank-0 lattice used for exact forms.
    pub fn trivial() -> Self {
        Lattice { periods: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.periods.len()
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn action(&self, point: &[i64]) -> f64 {
        self.periods.iter().zip(point).map(|(p, n)| p * *n as f64).sum()
    }

    fn check_point(&self, point: &[i64]) -> Result<(), RingError> {
        if point.len() != self.rank() {
            return Err(RingError::RankMismatch {
                point: point.to_vec(),
                got: point.len(),
                expected: self.rank(),
            });
        }
        Ok(())
    }

    /// Checks that no two points of `points` have equal action.
    pub fn check_collisions<'a, I>(&self, points: I) -> Result<(), RingError>
    where
        I: IntoIterator<Item = &'a Vec<i64>>,
    {
        let mut acts: Vec<(f64, &Vec<i64>)> = points.into_iter().map(|p| (self.action(p), p)).collect();
        acts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in acts.windows(2) {
            if (w[1].0 - w[0].0).abs() <= ACTION_COLLISION_TOL && w[0].1 != w[1].1 {
                return Err(RingError::ActionCollision {
                    a: w[0].1.clone(),
                    b: w[1].1.clone(),
                    action: w[0].0,
                });
            }
        }
        Ok(())
    }
}

/// What to do when distinct lattice points share an action value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionPolicy {
    #[default]
    Error,
    Merge,
}

/// A truncated element of the Novikov ring.
#[derive(Debug, Clone, PartialEq)]
pub struct RingElement {
    lattice: Lattice,
    terms: BTreeMap<Vec<i64>, BigRational>,
    action_bound: f64,
}

impl RingElement {
    /// The zero element, known up to `action_bound` (use `f64::INFINITY` for exact).
    pub fn zero(lattice: &Lattice, action_bound: f64) -> Self {
        RingElement { lattice: lattice.clone(), terms: BTreeMap::new(), action_bound }
    }

    /// `delta_point`, known exactly.
    pub fn delta(lattice: &Lattice, point: Vec<i64>) -> Result<Self, RingError> {
        Self::from_terms(lattice, [(point, BigRational::from_integer(1.into()))], f64::INFINITY)
    }

    pub fn from_terms<I>(lattice: &Lattice, terms: I, action_bound: f64) -> Result<Self, RingError>
    where
        I: IntoIterator<Item = (Vec<i64>, BigRational)>,
    {
        let mut map: BTreeMap<Vec<i64>, BigRational> = BTreeMap::new();
        for (p, c) in terms {
            lattice.check_point(&p)?;
            *map.entry(p).or_insert_with(BigRational::zero) += c;
        }
        map.retain(|_, c| !c.is_zero());
        Ok(RingElement { lattice: lattice.clone(), terms: map, action_bound })
    }

    /// Integer coefficients, convenient for trajectory counts.
    pub fn from_integers<I>(lattice: &Lattice, terms: I, action_bound: f64) -> Result<Self, RingError>
    where
        I: IntoIterator<Item = (Vec<i64>, i64)>,
    {
        Self::from_terms(
            lattice,
            terms.into_iter().map(|(p, c)| (p, BigRational::from_integer(c.into()))),
            action_bound,
        )
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn terms(&self) -> &BTreeMap<Vec<i64>, BigRational> {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, point: &[i64]) -> BigRational {
        self.terms.get(point).cloned().unwrap_or_else(BigRational::zero)
    }

    /// Smallest action in the support, or the bound when the support is empty.
    pub fn min_action(&self) -> f64 {
        self.terms
            .keys()
            .map(|p| self.lattice.action(p))
            .fold(f64::INFINITY, f64::min)
            .min(self.action_bound)
    }

    /// Drops terms above `bound` and lowers the bound to it.
    pub fn truncate(&self, bound: f64) -> Self {
        let b = bound.min(self.action_bound);
        let terms = self
            .terms
            .iter()
            .filter(|(p, _)| self.lattice.action(p) <= b)
            .map(|(p, c)| (p.clone(), c.clone()))
            .collect();
        RingElement { lattice: self.lattice.clone(), terms, action_bound: b }
    }

    fn same_lattice(&self, other: &Self) -> Result<(), RingError> {
        if self.lattice != other.lattice {
            return Err(RingError::LatticeMismatch(
                self.lattice.periods.clone(),
                other.lattice.periods.clone(),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, RingError> {
        self.same_lattice(other)?;
        let mut terms = self.terms.clone();
        for (p, c) in &other.terms {
            *terms.entry(p.clone()).or_insert_with(BigRational::zero) += c;
        }
        terms.retain(|_, c| !c.is_zero());
        Ok(RingElement {
            lattice: self.lattice.clone(),
            terms,
            action_bound: self.action_bound.min(other.action_bound),
        })
    }

    pub fn neg(&self) -> Self {
        RingElement {
            lattice: self.lattice.clone(),
            terms: self.terms.iter().map(|(p, c)| (p.clone(), -c)).collect(),
            action_bound: self.action_bound,
        }
    }

    /// Convolution product. The bound of the result is
    /// `min(f.bound + min_action(g), g.bound + min_action(f))`.
    pub fn convolve(&self, other: &Self) -> Result<Self, RingError> {
        self.same_lattice(other)?;
        let mut terms: BTreeMap<Vec<i64>, BigRational> = BTreeMap::new();
        for (p, a) in &self.terms {
            for (q, b) in &other.terms {
                let key: Vec<i64> = p.iter().zip(q).map(|(x, y)| x + y).collect();
                *terms.entry(key).or_insert_with(BigRational::zero) += a * b;
            }
        }
        terms.retain(|_, c| !c.is_zero());
        let bound = (self.action_bound + other.min_action()).min(other.action_bound + self.min_action());
        let bound = if bound.is_nan() { f64::INFINITY } else { bound };
        Ok(RingElement { lattice: self.lattice.clone(), terms, action_bound: bound })
    }

    /// `sum f(n) exp(-s * action(n))` over the stored support.
    pub fn evaluate(&self, s: Complex64) -> Complex64 {
        self.terms
            .iter()
            .map(|(p, c)| (-s * self.lattice.action(p)).exp() * c.to_f64().unwrap_or(f64::NAN))
            .sum()
    }

    /// Upper bound for the contribution of unknown terms to `evaluate` at `s`,
    /// assuming coefficients of modulus at most `coeff_max` and at most
    /// `count(a)` lattice points with action at most `a`. Only meaningful for
    /// `Re s > 0`; returns infinity otherwise.
    pub fn tail_bound(&self, s: Complex64, coeff_max: f64) -> f64 {
        if !self.action_bound.is_finite() {
            return 0.0;
        }
        if s.re <= 0.0 {
            return f64::INFINITY;
        }
        // Points with action in [R + k*w, R + (k+1)*w) are at most
        // (2k + 2R/w + 3)^r for a unit-width window w = min period.
        let r = self.lattice.rank() as i32;
        let w = self.lattice.periods.iter().cloned().fold(f64::INFINITY, f64::min);
        if r == 0 || !w.is_finite() {
            return 0.0;
        }
        let base = self.action_bound.abs() / w;
        let mut total = 0.0;
        for k in 0..10_000 {
            let a = self.action_bound + k as f64 * w;
            let count = (2.0 * (k as f64 + base) + 3.0).powi(r);
            let term = coeff_max * count * (-s.re * a).exp();
            total += term;
            if term < 1e-18 * total.max(1e-300) {
                break;
            }
        }
        total
    }

    /// Groups the support by action and sorts ascending.
    pub fn to_dirichlet(&self, policy: CollisionPolicy) -> Result<DirichletSeries, RingError> {
        let mut items: Vec<(f64, &Vec<i64>, f64)> = self
            .terms
            .iter()
            .map(|(p, c)| (self.lattice.action(p), p, c.to_f64().unwrap_or(f64::NAN)))
            .collect();
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let mut exponents: Vec<f64> = Vec::new();
        let mut coefficients: Vec<Complex64> = Vec::new();
        let mut last_point: Option<&Vec<i64>> = None;
        for (act, p, c) in items {
            match exponents.last() {
                Some(&prev) if (act - prev).abs() <= ACTION_COLLISION_TOL => {
                    if policy == CollisionPolicy::Error {
                        return Err(RingError::ActionCollision {
                            a: last_point.cloned().unwrap_or_default(),
                            b: p.clone(),
                            action: act,
                        });
                    }
                    *coefficients.last_mut().expect("nonempty") += c;
                }
                _ => {
                    exponents.push(act);
                    coefficients.push(Complex64::new(c, 0.0));
                }
            }
            last_point = Some(p);
        }
        let (e, c): (Vec<f64>, Vec<Complex64>) =
            exponents.into_iter().zip(coefficients).filter(|(_, c)| c.norm() > 0.0).unzip();
        DirichletSeries::new(e, c)
    }

    pub fn to_serialized(&self) -> SerializedElement {
        SerializedElement {
            rank: self.lattice.rank(),
            periods: self.lattice.periods.clone(),
            entries: self
                .terms
                .iter()
                .map(|(p, c)| (p.clone(), c.numer().to_string(), c.denom().to_string()))
                .collect(),
            action_bound: self.action_bound.is_finite().then_some(self.action_bound),
        }
    }

    pub fn from_serialized(s: &SerializedElement) -> Result<Self, RingError> {
        if s.periods.len() != s.rank {
            return Err(RingError::Malformed(format!("rank {} with {} periods", s.rank, s.periods.len())));
        }
        let lattice = Lattice::new(s.periods.clone())?;
        let mut terms = Vec::with_capacity(s.entries.len());
        for (p, n, d) in &s.entries {
            let n: BigInt = n.parse().map_err(|_| RingError::Malformed(format!("numerator {n}")))?;
            let d: BigInt = d.parse().map_err(|_| RingError::Malformed(format!("denominator {d}")))?;
            if d.is_zero() {
                return Err(RingError::Malformed("zero denominator".into()));
            }
            terms.push((p.clone(), BigRational::new(n, d)));
        }
        Self::from_terms(&lattice, terms, s.action_bound.unwrap_or(f64::INFINITY))
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            write!(f, "0")?;
        }
        for (i, (p, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "({c})d{p:?}")?;
        }
        if self.action_bound.is_finite() {
            write!(f, " [<= {:.6}]", self.action_bound)?;
        }
        Ok(())
    }
}

/// Keyed text form of a ring element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedElement {
    pub rank: usize,
    pub periods: Vec<f64>,
    /// `(lattice point, numerator, denominator)`; integers as decimal strings.
    pub entries: Vec<(Vec<i64>, String, String)>,
    /// `None` means exact.
    pub action_bound: Option<f64>,
}

/// Result of [`DirichletSeries::abscissa_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Abscissa {
    /// Finite sums converge everywhere.
    NegInfinity,
    Estimate(f64),
}

/// `sum_n a_n exp(-s lambda_n)` with strictly increasing exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletSeries {
    exponents: Vec<f64>,
    coefficients: Vec<Complex64>,
}

impl DirichletSeries {
    pub fn new(exponents: Vec<f64>, coefficients: Vec<Complex64>) -> Result<Self, RingError> {
        if exponents.len() != coefficients.len() {
            return Err(RingError::Malformed("exponent/coefficient length mismatch".into()));
        }
        if exponents.windows(2).any(|w| w[1] - w[0] < ACTION_COLLISION_TOL) {
            return Err(RingError::NonIncreasingExponents);
        }
        Ok(DirichletSeries { exponents, coefficients })
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn evaluate(&self, s: Complex64) -> Complex64 {
        self.exponents.iter().zip(&self.coefficients).map(|(l, a)| a * (-s * l).exp()).sum()
    }

    /// A stored series is a finite sum, hence entire.
    pub fn abscissa_estimate(&self) -> Abscissa {
        Abscissa::NegInfinity
    }
}

/// Estimates the abscissa of convergence of a series whose terms come from
/// `generator(n) = (lambda_n, a_n)` for `n = 0..n_terms`.
///
/// This is an ESTIMATE from finitely many terms. With partial sums
/// `A_n = a_0 + .. + a_n`, the classical formula is
/// `limsup log|A_n| / lambda_n` when the series diverges at 0, and
/// `limsup log|sum_{k>n} a_k| / lambda_n` otherwise. The limsup is
/// approximated on the last `window` terms by the suffix-maximum envelope of
/// the ratios, extrapolated linearly in `1/lambda_n`.
pub fn abscissa_from_generator<G>(generator: G, n_terms: usize, window: usize) -> Result<f64, RingError>
where
    G: Fn(usize) -> (f64, Complex64),
{
    if n_terms < 3 {
        return Err(RingError::InsufficientData { needed: 3, got: n_terms });
    }
    let terms: Vec<(f64, Complex64)> = (0..n_terms).map(&generator).collect();
    if terms.windows(2).any(|w| w[1].0 - w[0].0 < ACTION_COLLISION_TOL) {
        return Err(RingError::NonIncreasingExponents);
    }
    let mut partial = Vec::with_capacity(n_terms);
    let mut acc = Complex64::zero();
    for (_, a) in &terms {
        acc += a;
        partial.push(acc);
    }
    let window = window.clamp(3, n_terms);
    let start = n_terms - window;
    let lambdas: Vec<f64> = terms.iter().map(|t| t.0).collect();

    let divergent = limsup_ratio(&lambdas[start..], &partial[start..]);

    // Convergence test: the last half of the window barely moves the sum.
    let total = *partial.last().expect("nonempty");
    let mid = start + window / 2;
    let drift = (total - partial[mid]).norm();
    let converging = drift <= 1e-3 * total.norm().max(1e-300);
    if converging {
        // Tail sums use the first half of the window so they are not dominated
        // by the truncation point.
        let mut tails = vec![Complex64::zero(); n_terms];
        for i in (0..n_terms - 1).rev() {
            tails[i] = tails[i + 1] + terms[i + 1].1;
        }
        let tails = &tails[start..mid];
        if let Some(conv) = limsup_ratio(&lambdas[start..mid], tails) {
            if conv < 0.0 {
                return Ok(conv);
            }
        }
    }
    Ok(divergent.unwrap_or(f64::NEG_INFINITY))
}

/// Suffix-max envelope of `log|v_n| / lambda_n`, extrapolated to
/// `1/lambda -> 0` by least squares.
fn limsup_ratio(lambdas: &[f64], values: &[Complex64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(values)
        .filter(|(l, v)| **l > 0.0 && v.norm() > 0.0)
        .map(|(l, v)| (1.0 / l, v.norm().ln() / l))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let mut env = Vec::with_capacity(pts.len());
    let mut best = f64::NEG_INFINITY;
    for p in pts.iter().rev() {
        if p.1 >= best {
            best = p.1;
            env.push(*p);
        }
    }
    if env.len() < 2 {
        return Some(env[0].1);
    }
    let n = env.len() as f64;
    let mx = env.iter().map(|p| p.0).sum::<f64>() / n;
    let my = env.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = env.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Some(my);
    }
    let sxy: f64 = env.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(my - (sxy / sxx) * mx)
}

/// Options for [`fit_integer_coefficients`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegerFitOptions {
    /// Maximum condition number of the column-equilibrated design matrix.
    pub max_condition: f64,
    /// Largest allowed distance between a least-squares coefficient and its rounding.
    pub max_rounding_distance: f64,
    /// Largest allowed post-rounding residual relative to the sample norm.
    pub max_relative_residual: f64,
    /// Samples must have `t` above this value.
    pub declared_rho: f64,
    /// Floor for the sample norm in the residual test, so that values that
    /// vanish up to round-off can fit zero coefficients.
    pub min_scale: f64,
}

impl Default for IntegerFitOptions {
    fn default() -> Self {
        IntegerFitOptions {
            max_condition: 1e10,
            max_rounding_distance: 0.25,
            max_relative_residual: 0.1,
            declared_rho: f64::NEG_INFINITY,
            min_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegerFit {
    pub coefficients: Vec<i64>,
    pub raw: Vec<f64>,
    /// Residual norm of the least-squares solution before rounding.
    pub residual: f64,
    /// Residual norm after rounding.
    pub rounded_residual: f64,
    pub condition: f64,
}

/// Fits `value(t) = sum_k c_k exp(-t lambda_k)` by least squares and rounds
/// the coefficients to integers.
pub fn fit_integer_coefficients(
    samples: &[(f64, f64)],
    exponents: &[f64],
    opts: &IntegerFitOptions,
) -> Result<IntegerFit, RingError> {
    let m = samples.len();
    let k = exponents.len();
    if k == 0 {
        return Ok(IntegerFit {
            coefficients: vec![],
            raw: vec![],
            residual: samples.iter().map(|s| s.1 * s.1).sum::<f64>().sqrt(),
            rounded_residual: samples.iter().map(|s| s.1 * s.1).sum::<f64>().sqrt(),
            condition: 1.0,
        });
    }
    if m < k {
        return Err(RingError::InsufficientData { needed: k, got: m });
    }
    let mut ts: Vec<f64> = samples.iter().map(|s| s.0).collect();
    ts.sort_by(f64::total_cmp);
    if ts.windows(2).any(|w| w[1] - w[0] <= 0.0) {
        return Err(RingError::BadFitInput("sample t values must be distinct".into()));
    }
    if ts.iter().any(|t| *t <= opts.declared_rho) {
        return Err(RingError::BadFitInput(format!("sample t must exceed {}", opts.declared_rho)));
    }
    let a = DMatrix::from_fn(m, k, |i, j| (-samples[i].0 * exponents[j]).exp());
    let b = DVector::from_iterator(m, samples.iter().map(|s| s.1));
    let scales: Vec<f64> = (0..k).map(|j| a.column(j).norm().max(1e-300)).collect();
    let mut a_eq = a.clone();
    for j in 0..k {
        a_eq.column_mut(j).scale_mut(1.0 / scales[j]);
    }
    let svd = a_eq.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= opts.max_condition) {
        return Err(RingError::IllConditioned(condition));
    }
    let y = svd.solve(&b, 0.0).map_err(|e| RingError::BadFitInput(e.to_string()))?;
    let raw: Vec<f64> = (0..k).map(|j| y[j] / scales[j]).collect();
    let residual = (&a * DVector::from_vec(raw.clone()) - &b).norm();
    let coefficients: Vec<i64> = raw.iter().map(|c| c.round() as i64).collect();
    let distance = raw.iter().zip(&coefficients).map(|(r, c)| (r - *c as f64).abs()).fold(0.0, f64::max);
    let rounded = DVector::from_iterator(k, coefficients.iter().map(|c| *c as f64));
    let rounded_residual = (&a * rounded - &b).norm();
    if distance > opts.max_rounding_distance || rounded_residual > opts.max_relative_residual * b.norm().max(opts.min_scale) {
        return Err(RingError::NoIntegerFit { distance, residual: rounded_residual });
    }
    Ok(IntegerFit { coefficients, raw, residual, rounded_residual, condition })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64) -> BigRational {
        BigRational::from_integer(n.into())
    }

    #[test]
    fn delta_zero_is_identity() {
        let lat = Lattice::new(vec![1.0, 2f64.sqrt()]).unwrap();
        let f = RingElement::from_integers(&lat, [(vec![1, 0], 3), (vec![-2, 5], -1)], 10.0).unwrap();
        let one = RingElement::delta(&lat, vec![0, 0]).unwrap();
        let p = one.convolve(&f).unwrap();
        assert_eq!(p.terms(), f.terms());
    }

    #[test]
    fn translation_of_deltas() {
        let lat = Lattice::new(vec![1.0, 2f64.sqrt()]).unwrap();
        let a = RingElement::delta(&lat, vec![1, 0]).unwrap();
        let b = RingElement::delta(&lat, vec![0, 1]).unwrap();
        let p = a.convolve(&b).unwrap();
        assert_eq!(p, RingElement::delta(&lat, vec![1, 1]).unwrap());
    }

    #[test]
    fn square_of_binomial() {
        let lat = Lattice::new(vec![1.0]).unwrap();
        let f = RingElement::from_integers(&lat, [(vec![0], 1), (vec![1], 1)], f64::INFINITY).unwrap();
        let sq = f.convolve(&f).unwrap();
        // Independent double sum over the supports.
        let mut expect: BTreeMap<Vec<i64>, BigRational> = BTreeMap::new();
        for (p, a) in f.terms() {
            for (r, b) in f.terms() {
                *expect.entry(vec![p[0] + r[0]]).or_insert_with(BigRational::zero) += a * b;
            }
        }
        assert_eq!(sq.terms(), &expect);
        assert_eq!(sq.coefficient(&[1]), q(2));
    }

    #[test]
    fn lattice_mismatch_is_an_error() {
        let a = RingElement::delta(&Lattice::new(vec![1.0]).unwrap(), vec![0]).unwrap();
        let b = RingElement::delta(&Lattice::new(vec![2.0]).unwrap(), vec![0]).unwrap();
        assert!(matches!(a.convolve(&b), Err(RingError::LatticeMismatch(..))));
    }

    #[test]
    fn bound_propagation() {
        let lat = Lattice::new(vec![1.0]).unwrap();
        let f = RingElement::from_integers(&lat, [(vec![1], 1)], 5.0).unwrap();
        let g = RingElement::from_integers(&lat, [(vec![2], 1)], 4.0).unwrap();
        let p = f.convolve(&g).unwrap();
        assert_eq!(p.action_bound(), (5.0f64 + 2.0).min(4.0 + 1.0));
    }

    #[test]
    fn evaluate_single_delta() {
        let lat = Lattice::new(vec![1.0]).unwrap();
        let f = RingElement::delta(&lat, vec![1]).unwrap();
        let v = f.evaluate(Complex64::new(1.0, 0.0));
        assert!((v.re - 0.367879441171442).abs() < 1e-12 && v.im.abs() < 1e-15);
    }

    #[test]
    fn evaluate_geometric_series() {
        let lat = Lattice::new(vec![1.0]).unwrap();
        let f = RingElement::from_integers(&lat, (0..=100).map(|n| (vec![n], 1)), f64::INFINITY).unwrap();
        let v = f.evaluate(Complex64::new(1.0, 0.0));
        let oracle = 1.0 / (1.0 - (-1.0f64).exp());
        assert!((v.re - oracle).abs() < 1e-12, "{} vs {}", v.re, oracle);
        assert!((oracle - 1.581976707).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_of_single_delta() {
        let lat = Lattice::new(vec![1.0]).unwrap();
        let d = RingElement::delta(&lat, vec![2]).unwrap().to_dirichlet(CollisionPolicy::Error).unwrap();
        assert_eq!(d.exponents(), &[2.0]);
        assert_eq!(d.coefficients(), &[Complex64::new(1.0, 0.0)]);
    }

    #[test]
    fn dirichlet_sorts_by_action() {
        let lat = Lattice::new(vec![1.0, 2f64.sqrt()]).unwrap();
        let f = RingElement::from_integers(&lat, [(vec![0, 1], 1), (vec![1, 0], 1)], f64::INFINITY).unwrap();
        let d = f.to_dirichlet(CollisionPolicy::Error).unwrap();
        assert_eq!(d.exponents()[0], 1.0);
        assert!((d.exponents()[1] - 1.41421356237).abs() < 1e-10);
        assert_eq!(d.coefficients(), &[Complex64::new(1.0, 0.0); 2]);
    }

    #[test]
    fn dirichlet_collision_policies() {
        let lat = Lattice::new(vec![1.0, 2.0]).unwrap();
        let f = RingElement::from_integers(&lat, [(vec![2, 0], 1), (vec![0, 1], -1)], f64::INFINITY).unwrap();
        assert!(matches!(f.to_dirichlet(CollisionPolicy::Error), Err(RingError::ActionCollision { .. })));
        let merged = f.to_dirichlet(CollisionPolicy::Merge).unwrap();
        assert!(merged.is_empty());
    }

    #[test]
    fn finite_series_abscissa() {
        let d = DirichletSeries::new(vec![0.0, 1.0], vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        assert_eq!(d.abscissa_estimate(), Abscissa::NegInfinity);
    }

    #[test]
    fn abscissa_zeta_type() {
        let est = abscissa_from_generator(|n| ((n + 1) as f64, Complex64::new(1.0, 0.0)), 200, 50).unwrap();
        assert!(est.abs() < 0.05, "{est}");
    }

    #[test]
    fn abscissa_exponential_growth() {
        let est =
            abscissa_from_generator(|n| ((n + 1) as f64, Complex64::new((2.0 * (n + 1) as f64).exp(), 0.0)), 50, 50)
                .unwrap();
        assert!((est - 2.0).abs() < 0.05, "{est}");
    }

    #[test]
    fn abscissa_convergent_series() {
        let est =
            abscissa_from_generator(|n| ((n + 1) as f64, Complex64::new((-(n as f64 + 1.0)).exp(), 0.0)), 60, 50)
                .unwrap();
        assert!((est + 1.0).abs() < 0.1, "{est}");
    }

    #[test]
    fn abscissa_needs_three_terms() {
        let r = abscissa_from_generator(|n| (n as f64, Complex64::new(1.0, 0.0)), 2, 50);
        assert!(matches!(r, Err(RingError::InsufficientData { .. })));
    }

    fn synth(f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        (1..=10).map(|t| (t as f64, f(t as f64))).collect()
    }

    #[test]
    fn fit_single_exponent() {
        let s = synth(|t| 3.0 * (-2.0 * t).exp());
        let fit = fit_integer_coefficients(&s, &[2.0], &IntegerFitOptions::default()).unwrap();
        assert_eq!(fit.coefficients, vec![3]);
    }

    #[test]
    fn fit_two_exponents() {
        let s = synth(|t| (-t).exp() - 2.0 * (-3.0 * t).exp());
        let fit = fit_integer_coefficients(&s, &[1.0, 3.0], &IntegerFitOptions::default()).unwrap();
        assert_eq!(fit.coefficients, vec![1, -2]);
    }

    #[test]
    fn fit_with_noise() {
        let mut s = synth(|t| (-t).exp() - 2.0 * (-3.0 * t).exp());
        for (i, p) in s.iter_mut().enumerate() {
            p.1 += if i % 2 == 0 { 1e-6 } else { -1e-6 };
        }
        let fit = fit_integer_coefficients(&s, &[1.0, 3.0], &IntegerFitOptions::default()).unwrap();
        assert_eq!(fit.coefficients, vec![1, -2]);
        assert!(fit.residual < 1e-4);
    }

    #[test]
    fn fit_rejects_non_integer_data() {
        let s = synth(|t| 0.5 * (-t).exp());
        let r = fit_integer_coefficients(&s, &[1.0], &IntegerFitOptions::default());
        assert!(matches!(r, Err(RingError::NoIntegerFit { .. })));
    }

    #[test]
    fn fit_rejects_nearly_equal_exponents() {
        let s = synth(|t| (-t).exp());
        let r = fit_integer_coefficients(&s, &[1.0, 1.0 + 1e-11], &IntegerFitOptions::default());
        assert!(matches!(r, Err(RingError::IllConditioned(_))));
    }

    #[test]
    fn serialization_round_trip() {
        let lat = Lattice::new(vec![0.3, 0.7]).unwrap();
        let f = RingElement::from_terms(
            &lat,
            [(vec![1, -1], BigRational::new(3.into(), 7.into())), (vec![0, 2], q(-5))],
            4.5,
        )
        .unwrap();
        let text = serde_json::to_string(&f.to_serialized()).unwrap();
        let back: SerializedElement = serde_json::from_str(&text).unwrap();
        assert_eq!(RingElement::from_serialized(&back).unwrap(), f);
    }
}
