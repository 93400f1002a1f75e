use std::f64::consts::PI;

use novikov_lab::gradient_flow::{
    connections_from, estimate_rho, incidence_table, FlowOptions, RhoOptions,
};
use novikov_lab::model_manifold::{presets, ModelManifold, ZeroOptions, TWO_PI};
use proptest::prelude::*;

fn model(spec: novikov_lab::model_manifold::ManifoldSpec) -> (ModelManifold, Vec<novikov_lab::model_manifold::CriticalPoint>) {
    let m = ModelManifold::new(spec).unwrap();
    let z = m.find_zeros(16, &ZeroOptions::default()).unwrap();
    (m, z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn h_lift_gradient_is_the_form(x in -7.0f64..7.0, y in -7.0f64..7.0) {
        let m = ModelManifold::new(presets::torus_novikov(0.3, 0.5)).unwrap();
        let w = m.omega(&[x, y]);
        let e = 1e-5;
        let gx = (m.h_lift(&[x + e, y]) - m.h_lift(&[x - e, y])) / (2.0 * e);
        let gy = (m.h_lift(&[x, y + e]) - m.h_lift(&[x, y - e])) / (2.0 * e);
        prop_assert!((gx - w[0]).abs() < 1e-6 && (gy - w[1]).abs() < 1e-6);
    }
}

#[test]
fn zeros_solve_the_form() {
    for spec in [presets::torus_exact(), presets::torus_novikov(0.3, 0.5), presets::circle_exact()] {
        let (m, z) = model(spec);
        let tol = ZeroOptions::default().newton_tol;
        for c in &z {
            assert!(m.omega_norm_sq(&c.position).sqrt() < tol, "{:?}", c.position);
        }
        assert_eq!(ModelManifold::euler_characteristic(&z), 0);
    }
}

#[test]
fn shifted_cosine_zeros() {
    let (_, z) = model(presets::torus_novikov(0.5, 1.0));
    assert_eq!(z.len(), 4);
    let a = 0.5f64.asin();
    for c in &z {
        let (t1, t2) = (c.position[0], c.position[1]);
        assert!((t1 - a).abs() < 1e-9 || (t1 - (PI - a)).abs() < 1e-9, "{t1}");
        assert!(t2.abs() < 1e-9 || (t2 - PI).abs() < 1e-9 || (t2 - TWO_PI).abs() < 1e-9, "{t2}");
    }
}

#[test]
fn trajectories_descend_and_carry_their_action() {
    let (m, z) = model(presets::torus_novikov(0.3, 0.5));
    let opts = FlowOptions::default();
    for x in z.iter().filter(|c| c.index >= 1) {
        for t in connections_from(&m, &z, x, 6.0, opts.n_directions, &opts).unwrap() {
            let hs: Vec<f64> = t.samples.iter().map(|p| m.h_lift(p)).collect();
            assert!(hs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            let drop = hs[0] - hs[hs.len() - 1];
            // Samples start on the launch sphere and stop inside the capture ball.
            assert!((drop - t.action).abs() < 1e-3, "drop {drop} action {}", t.action);
        }
    }
}

#[test]
fn counts_are_stable_under_refinement() {
    let (m, z) = model(presets::torus_novikov(0.3, 0.5));
    let r = 3.0 * TWO_PI * 0.3;
    let coarse = incidence_table(&m, &z, r, &FlowOptions::default()).unwrap();
    let fine = incidence_table(&m, &z, r, &FlowOptions { n_directions: 2 * coarse.n_directions, ..Default::default() }).unwrap();
    assert!(coarse.stabilized);
    assert_eq!(coarse.entries, fine.entries);
}

#[test]
fn rho_vanishes_on_surfaces() {
    for spec in [presets::torus_exact(), presets::torus_novikov(0.3, 0.5)] {
        let (m, z) = model(spec);
        for x in z.iter().filter(|c| c.index > 0) {
            let r = estimate_rho(&m, &z, x, &RhoOptions::default(), &FlowOptions::default()).unwrap();
            assert!(r.rho_hat <= 0.1, "x {} rho {}", x.id, r.rho_hat);
        }
    }
}

#[test]
fn top_partial_integrals_bounded_by_volume() {
    let (m, z) = model(presets::torus_exact());
    let max = z.iter().find(|c| c.index == 2).unwrap();
    let r = estimate_rho(&m, &z, max, &RhoOptions::default(), &FlowOptions::default()).unwrap();
    for row in &r.integrals {
        for v in row {
            assert!(*v <= TWO_PI * TWO_PI * (1.0 + 1e-6));
        }
    }
}

#[test]
fn rho_of_a_product_is_bounded_by_its_factors() {
    let spec = presets::product(&presets::torus_exact(), &presets::torus_novikov(0.3, 0.5));
    let (m, z) = model(spec);
    let ropts = RhoOptions { sphere_resolution: 12, top_grid: 12, ..Default::default() };
    let mut worst = 0.0f64;
    for x in z.iter().filter(|c| c.index > 0) {
        let r = estimate_rho(&m, &z, x, &ropts, &FlowOptions::default()).unwrap();
        worst = worst.max(r.rho_hat);
    }
    assert!(worst <= 0.1, "{worst}");
}
