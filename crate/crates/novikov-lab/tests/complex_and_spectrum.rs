use num_complex::Complex64;
use novikov_lab::gradient_flow::{incidence_table, FlowOptions};
use novikov_lab::model_manifold::{presets, CriticalPoint, ManifoldSpec, ModelManifold, ZeroOptions, TWO_PI};
use novikov_lab::novikov_complex::{assemble, homology_ranks, specialize, verify_d_squared, NovikovComplex};
use novikov_lab::witten_spectral::{
    build_delta_t, build_quasimode, rayleigh_quotient, spectrum, supersymmetry_residual, verify_gap, Discretization,
    EigenOptions, FormField, GapOptions, QuasimodeOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type C = Complex64;

fn model(spec: ManifoldSpec) -> (ModelManifold, Vec<CriticalPoint>) {
    let m = ModelManifold::new(spec).unwrap();
    let z = if m.terms().is_empty() { vec![] } else { m.find_zeros(16, &ZeroOptions::default()).unwrap() };
    (m, z)
}

fn complex_of(spec: ManifoldSpec, bound: f64) -> (ModelManifold, Vec<CriticalPoint>, NovikovComplex) {
    let (m, z) = model(spec);
    let table = incidence_table(&m, &z, bound, &FlowOptions::default()).unwrap();
    let c = assemble(&table, &m, &z).unwrap();
    (m, z, c)
}

#[test]
fn circle_boundary_is_zero_and_homology_is_the_circle() {
    let (_, _, c) = complex_of(presets::circle_exact(), 4.0);
    let sc = specialize(&c, C::new(0.0, 0.0), None);
    assert_eq!(sc.matrices.len(), 1);
    assert!(sc.matrices[0].iter().all(|v| v.norm() == 0.0));
    assert_eq!(homology_ranks(&sc).betti, vec![1, 1]);
}

#[test]
fn novikov_torus_specializations_compose_to_zero() {
    let (_, _, c) = complex_of(presets::torus_novikov(0.3, 0.5), 3.0 * TWO_PI * 0.3);
    verify_d_squared(&c).unwrap();
    assert_eq!(c.euler_characteristic(), 0);
    for s in [C::new(0.5, 0.0), C::new(2.0, 1.0), C::new(4.0, -3.0)] {
        assert!(specialize(&c, s, None).max_composition_residual() < 1e-8);
    }
}

#[test]
fn betti_numbers_are_constant_over_a_sample_of_s() {
    let (_, _, c) = complex_of(presets::torus_novikov(0.3, 0.5), 3.0 * TWO_PI * 0.3);
    // The abscissa estimate on surfaces is 0, so Re s > 1 is admissible.
    for s in [C::new(1.5, 0.0), C::new(2.0, 0.3), C::new(2.5, -1.0), C::new(3.0, 2.0), C::new(4.0, 0.0)] {
        assert_eq!(homology_ranks(&specialize(&c, s, Some(0.0))).betti, vec![0, 0, 0], "s = {s}");
    }
}

#[test]
fn constant_form_has_no_complex_and_no_small_spectrum() {
    let (m, z) = model(presets::constant(vec![0.7, 0.7 * 2f64.sqrt()]));
    assert!(z.is_empty());
    let table = incidence_table(&m, &z, 5.0, &FlowOptions::default()).unwrap();
    let c = assemble(&table, &m, &z).unwrap();
    assert!((0..=2).all(|q| c.dim(q) == 0));
    assert_eq!(homology_ranks(&specialize(&c, C::new(1.0, 0.0), None)).betti, vec![0, 0, 0]);
    for q in 0..=2 {
        let rep = verify_gap(&m, &z, q, &[8.0, 12.0, 16.0, 20.0], 24, &GapOptions::default()).unwrap();
        assert!(rep.entries.iter().filter(|e| e.t >= 12.0).all(|e| e.small_count == 0));
    }
}

#[test]
fn flat_spectrum_and_vanishing_form() {
    let (m, _) = model(presets::constant(vec![0.0, 0.0]));
    let op = build_delta_t(&m, 0, 0.0, 16).unwrap();
    let e = spectrum(&op, 5, &EigenOptions::default()).unwrap();
    for (a, b) in e.values.iter().zip([0.0, 1.0, 1.0, 1.0, 1.0]) {
        assert!((a - b).abs() < 1e-9);
    }
    // With the form identically zero the deformation does nothing.
    let disc = Discretization::new(&m, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for q in 0..=2 {
        let u = FormField::random_band_limited(2, q, 16, 5, &mut rng);
        let mut d = disc.laplacian(&u, 7.0);
        d.axpy(C::new(-1.0, 0.0), &disc.laplacian(&u, 0.0));
        assert!(d.norm() < 1e-12 * u.norm());
    }
}

#[test]
fn linear_part_of_the_deformation_is_a_multiplier() {
    let (m, _) = model(presets::torus_novikov(0.3, 0.5));
    let disc = Discretization::new(&m, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for q in 0..=2 {
        let u = FormField::random_band_limited(2, q, 32, 4, &mut rng);
        let z2 = disc.zero_order_part(&u, 2.0);
        let z5 = disc.zero_order_part(&u, 5.0);
        let mut diff = z2.clone();
        diff.axpy(C::new(-1.0, 0.0), &z5);
        assert!(diff.norm() < 1e-10 * (1.0 + z2.norm()));
        // Multiplying by a smooth function commutes with a zero-order operator.
        let phi = |p: &[f64]| C::new(1.0 + 0.3 * (p[0] - 2.0 * p[1]).cos(), 0.2 * p[1].sin());
        let mut pu = u.clone();
        let mut pz = z2.clone();
        for i in 0..u.node_count() {
            let f = phi(&u.node(i));
            pu.components.iter_mut().for_each(|c| c[i] *= f);
            pz.components.iter_mut().for_each(|c| c[i] *= f);
        }
        let mut d = disc.zero_order_part(&pu, 2.0);
        d.axpy(C::new(-1.0, 0.0), &pz);
        assert!(d.norm() < 1e-9 * (1.0 + pz.norm()), "q = {q}: {}", d.norm());
    }
}

#[test]
fn nonzero_spectra_pair_under_the_differential() {
    let (m, _) = model(presets::torus_novikov(0.3, 0.5));
    let t = 3.0;
    for q in 0..2 {
        let op = build_delta_t(&m, q, t, 24).unwrap();
        let e = spectrum(&op, 6, &EigenOptions { tol: 1e-10, ..Default::default() }).unwrap();
        assert!(supersymmetry_residual(&op.disc, t, &e, 1e-6) < 1e-6);
    }
}

#[test]
fn small_eigenvalues_are_stable_under_refinement() {
    let (m, _) = model(presets::torus_novikov(0.3, 0.5));
    let t = 8.0;
    let coarse = spectrum(&build_delta_t(&m, 0, t, 32).unwrap(), 3, &EigenOptions::default()).unwrap();
    let fine = spectrum(&build_delta_t(&m, 0, t, 64).unwrap(), 3, &EigenOptions::default()).unwrap();
    let (a, b) = (coarse.values[0], fine.values[0]);
    assert!(a < 1.0 && (a - b).abs() < 0.01 * b, "{a} vs {b}");
}

#[test]
fn gap_counts_on_circle_and_torus() {
    let (m, z) = model(presets::circle_exact());
    for q in 0..=1 {
        let rep = verify_gap(&m, &z, q, &[10.0, 12.0, 16.0, 20.0], 192, &GapOptions::default()).unwrap();
        assert!(rep.entries.iter().all(|e| e.small_count == 1));
    }
    let (m, z) = model(presets::torus_exact());
    for (q, want) in [1usize, 2, 1].into_iter().enumerate() {
        let op = build_delta_t(&m, q, 15.0, 48).unwrap();
        let e = spectrum(&op, want + 2, &EigenOptions::default()).unwrap();
        assert_eq!(e.values.iter().filter(|l| **l < 1.0).count(), want);
        assert_eq!(z.iter().filter(|c| c.index == q).count(), want);
    }
}

#[test]
fn wrong_degree_quasimodes_cost_energy() {
    let (m, z) = model(presets::torus_exact());
    let t = 15.0;
    let disc = Discretization::new(&m, 48).unwrap();
    for y in &z {
        for q in 0..=2usize {
            let f = build_quasimode(&m, &z, y, t, 48, &QuasimodeOptions { degree: Some(q), ..Default::default() }).unwrap();
            let rq = rayleigh_quotient(&disc, &f, t);
            let gap = 2.0 * t * (q as f64 - y.index as f64).abs();
            assert!(rq >= 0.9 * gap, "index {} degree {q}: {rq} < {gap}", y.index);
            if q == y.index {
                assert!(rq < 1.0);
            }
        }
    }
}
