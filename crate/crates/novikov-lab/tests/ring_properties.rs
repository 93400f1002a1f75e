use std::f64::consts::SQRT_2;

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use novikov_lab::novikov_ring::{CollisionPolicy, Lattice, RingElement};
use proptest::prelude::*;

fn lattice(rank: usize) -> Lattice {
    match rank {
        1 => Lattice::new(vec![1.0]).unwrap(),
        _ => Lattice::new(vec![1.0, SQRT_2]).unwrap(),
    }
}

/// Up to 8 terms with small rational coefficients, points in `[-3, 5]^rank`.
fn element(rank: usize) -> impl Strategy<Value = RingElement> {
    let term = (prop::collection::vec(-3i64..=5, rank), -9i64..=9, 1i64..=6);
    (prop::collection::vec(term, 0..=8), prop_oneof![Just(f64::INFINITY), 2.0f64..12.0]).prop_map(move |(terms, bound)| {
        let l = lattice(rank);
        let terms = terms.into_iter().map(|(p, n, d)| (p, BigRational::new(BigInt::from(n), BigInt::from(d))));
        RingElement::from_terms(&l, terms, bound).unwrap().truncate(bound)
    })
}

fn triple() -> impl Strategy<Value = (RingElement, RingElement, RingElement)> {
    (1usize..=2).prop_flat_map(|r| (element(r), element(r), element(r)))
}

fn same_below(a: &RingElement, b: &RingElement) -> bool {
    let bound = a.action_bound().min(b.action_bound());
    a.truncate(bound).terms() == b.truncate(bound).terms()
}

fn s_value() -> impl Strategy<Value = Complex64> {
    (0.05f64..3.0, -4.0f64..4.0).prop_map(|(re, im)| Complex64::new(re, im))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn convolution_is_commutative((f, g, _) in triple()) {
        let fg = f.convolve(&g).unwrap();
        let gf = g.convolve(&f).unwrap();
        prop_assert_eq!(fg.terms(), gf.terms());
        prop_assert!(same_below(&fg, &gf));
    }

    #[test]
    fn convolution_is_associative((f, g, h) in triple()) {
        let left = f.convolve(&g).unwrap().convolve(&h).unwrap();
        let right = f.convolve(&g.convolve(&h).unwrap()).unwrap();
        prop_assert!(same_below(&left, &right));
    }

    #[test]
    fn convolution_distributes_over_addition((f, g, h) in triple()) {
        let left = f.convolve(&g.add(&h).unwrap()).unwrap();
        let right = f.convolve(&g).unwrap().add(&f.convolve(&h).unwrap()).unwrap();
        prop_assert!(same_below(&left, &right));
    }

    #[test]
    fn evaluation_is_multiplicative((f, g, _) in triple(), s in s_value()) {
        let lhs = f.convolve(&g).unwrap().evaluate(s);
        let direct: Complex64 = f
            .terms()
            .iter()
            .flat_map(|(p, a)| g.terms().iter().map(move |(q, b)| (p, a, q, b)))
            .map(|(p, a, q, b)| {
                let act = f.lattice().action(p) + g.lattice().action(q);
                let c = num_traits::ToPrimitive::to_f64(&(a * b)).unwrap();
                (-s * act).exp() * c
            })
            .sum();
        let rhs = f.evaluate(s) * g.evaluate(s);
        let scale = 1.0 + direct.norm() + rhs.norm();
        prop_assert!((lhs - rhs).norm() <= 1e-11 * scale);
        prop_assert!((lhs - direct).norm() <= 1e-11 * scale);
    }

    #[test]
    fn delta_zero_evaluates_to_one(rank in 1usize..=2, s in s_value()) {
        let one = RingElement::delta(&lattice(rank), vec![0; rank]).unwrap();
        prop_assert!((one.evaluate(s) - 1.0).norm() < 1e-15);
    }

    #[test]
    fn dirichlet_form_preserves_evaluation((f, _, _) in triple(), s in s_value()) {
        let d = f.to_dirichlet(CollisionPolicy::Error).unwrap();
        let a = f.evaluate(s);
        prop_assert!((d.evaluate(s) - a).norm() <= 1e-14 * (1.0 + a.norm()) * 8.0);
    }

    #[test]
    fn serialization_round_trips((f, _, _) in triple()) {
        let back = RingElement::from_serialized(&f.to_serialized()).unwrap();
        prop_assert_eq!(back, f);
    }
}

#[test]
fn rank_two_dirichlet_sorts_by_action() {
    let l = lattice(2);
    let f = RingElement::from_integers(&l, [(vec![0, 1], 1), (vec![1, 0], 1)], f64::INFINITY).unwrap();
    let d = f.to_dirichlet(CollisionPolicy::Error).unwrap();
    assert_eq!(d.exponents().len(), 2);
    assert!((d.exponents()[0] - 1.0).abs() < 1e-15);
    assert!((d.exponents()[1] - SQRT_2).abs() < 1e-15);
    assert_eq!(d.coefficients(), &[Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]);
}

#[test]
fn geometric_series_oracle() {
    let l = lattice(1);
    let f = RingElement::from_integers(&l, (0..=100).map(|n| (vec![n], 1)), f64::INFINITY).unwrap();
    let v = f.evaluate(Complex64::new(1.0, 0.0));
    let q = (-1.0f64).exp();
    let oracle = (1.0 - q.powi(101)) / (1.0 - q);
    assert!((v.re - oracle).abs() < 1e-12 && v.im == 0.0);
    assert!((v.re - 1.0 / (1.0 - q)).abs() < 1e-12);
}
