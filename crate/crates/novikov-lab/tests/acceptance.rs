//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Runs without the libtest harness so the
//! lines always show up in the output.

use std::f64::consts::SQRT_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use novikov_lab::cli_runner::{run, RunConfig, RunOptions};
use novikov_lab::gradient_flow::{estimate_rho, incidence_table, FlowOptions, RhoOptions};
use novikov_lab::integration_bridge::{build_charts, recovery_report, verify_chain_map, ChartOptions, RecoveryOptions};
use novikov_lab::model_manifold::{presets, CriticalPoint, ManifoldSpec, ModelManifold, TrigTerm, ZeroOptions, TWO_PI};
use novikov_lab::novikov_complex::{assemble, homology_ranks, specialize, verify_d_squared};
use novikov_lab::novikov_ring::{CollisionPolicy, Lattice, RingElement};
use novikov_lab::witten_spectral::{
    build_delta_t, build_quasimode, linear_fit, local_levels, local_model_spectrum, minimax_check, spectrum,
    verify_gap, Discretization, EigenOptions, FormField, GapOptions, LocalModel, QuasimodeOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type C = Complex64;
type Check = Result<String, String>;

fn model(spec: ManifoldSpec) -> (ModelManifold, Vec<CriticalPoint>) {
    let m = ModelManifold::new(spec).expect("valid model");
    let z = if m.terms().is_empty() { vec![] } else { m.find_zeros(16, &ZeroOptions::default()).expect("zeros") };
    (m, z)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn counts_by_index(z: &[CriticalPoint], n: usize) -> Vec<usize> {
    (0..=n).map(|q| z.iter().filter(|c| c.index == q).count()).collect()
}

fn random_element(rng: &mut ChaCha8Rng, lattice: &Lattice) -> RingElement {
    let r = lattice.rank();
    let len = rng.gen_range(0..=8);
    let terms: Vec<(Vec<i64>, BigRational)> = (0..len)
        .map(|_| {
            let p = (0..r).map(|_| rng.gen_range(-3..=5)).collect();
            let c = BigRational::new(BigInt::from(rng.gen_range(-9..=9)), BigInt::from(rng.gen_range(1..=6)));
            (p, c)
        })
        .collect();
    let bound = if rng.gen_bool(0.5) { f64::INFINITY } else { rng.gen_range(2.0..12.0) };
    RingElement::from_terms(lattice, terms, bound).unwrap().truncate(bound)
}

fn same_below(a: &RingElement, b: &RingElement) -> bool {
    let bound = a.action_bound().min(b.action_bound());
    a.truncate(bound).terms() == b.truncate(bound).terms()
}

fn ring_axioms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut triples = 0;
    let mut worst_mult = 0.0f64;
    for lattice in [Lattice::new(vec![1.0]).unwrap(), Lattice::new(vec![1.0, SQRT_2]).unwrap()] {
        let els: Vec<RingElement> = (0..100).map(|_| random_element(&mut rng, &lattice)).collect();
        for i in 0..els.len() {
            let (f, g, h) = (&els[i], &els[(i + 1) % 100], &els[(i + 2) % 100]);
            let fg = f.convolve(g).unwrap();
            ensure(fg.terms() == g.convolve(f).unwrap().terms(), || format!("commutativity fails at {i}"))?;
            let left = fg.convolve(h).unwrap();
            let right = f.convolve(&g.convolve(h).unwrap()).unwrap();
            ensure(same_below(&left, &right), || format!("associativity fails at {i}"))?;
            let s = C::new(rng.gen_range(0.05..3.0), rng.gen_range(-4.0..4.0));
            let (lhs, rhs) = (fg.evaluate(s), f.evaluate(s) * g.evaluate(s));
            let err = (lhs - rhs).norm() / (1.0 + lhs.norm() + rhs.norm());
            worst_mult = worst_mult.max(err);
            triples += 1;
        }
    }
    ensure(worst_mult <= 1e-12, || format!("multiplicativity error {worst_mult:.2e}"))?;
    let l = Lattice::new(vec![1.0]).unwrap();
    let f = RingElement::from_integers(&l, (0..=100).map(|n| (vec![n], 1)), f64::INFINITY).unwrap();
    let d = f.to_dirichlet(CollisionPolicy::Error).unwrap();
    let geo = 1.0 / (1.0 - (-1.0f64).exp());
    let geo_err = (d.evaluate(C::new(1.0, 0.0)) - geo).norm();
    ensure(geo_err < 1e-12, || format!("geometric series error {geo_err:.2e}"))?;
    Ok(format!("{triples} triples exact, multiplicativity {worst_mult:.1e}, geometric series {geo_err:.1e}"))
}

fn exact_torus() -> Check {
    let (m, z) = model(presets::torus_exact());
    let counts = counts_by_index(&z, 2);
    ensure(counts == [1, 2, 1], || format!("critical counts {counts:?}"))?;
    let table = incidence_table(&m, &z, 10.0, &FlowOptions::default()).map_err(|e| e.to_string())?;
    let c = assemble(&table, &m, &z).map_err(|e| e.to_string())?;
    let d2 = verify_d_squared(&c).map_err(|e| e.to_string())?;
    let betti = homology_ranks(&specialize(&c, C::new(0.0, 0.0), None)).betti;
    ensure(betti == [1, 2, 1], || format!("betti at s = 0: {betti:?}"))?;
    Ok(format!("counts {counts:?}, d^2 = 0 ({} compositions), betti {betti:?}", d2.compositions_checked))
}

fn novikov_torus() -> Check {
    // The literal weak perturbation has no zeros at all.
    let (m, z) = model(presets::torus_novikov(0.3, 0.1));
    let bound = 3.0 * TWO_PI * 0.3;
    let table = incidence_table(&m, &z, bound, &FlowOptions::default()).map_err(|e| e.to_string())?;
    let c = assemble(&table, &m, &z).map_err(|e| e.to_string())?;
    verify_d_squared(&c).map_err(|e| e.to_string())?;
    for re in [2.0, 3.0, 4.0] {
        let b = homology_ranks(&specialize(&c, C::new(re, 0.0), Some(0.0))).betti;
        ensure(b == [0, 0, 0], || format!("scale 0.1, Re s = {re}: betti {b:?}"))?;
    }
    let literal = format!("scale 0.1: {} zeros", z.len());

    let (m, z) = model(presets::torus_novikov(0.3, 0.5));
    ensure(counts_by_index(&z, 2) == [1, 2, 1], || format!("scale 0.5 counts {:?}", counts_by_index(&z, 2)))?;
    let table = incidence_table(&m, &z, bound, &FlowOptions::default()).map_err(|e| e.to_string())?;
    let c = assemble(&table, &m, &z).map_err(|e| e.to_string())?;
    let d2 = verify_d_squared(&c).map_err(|e| e.to_string())?;
    ensure(d2.max_violation == 0.0, || format!("d^2 violation {}", d2.max_violation))?;
    for re in [2.0, 3.0, 4.0] {
        let b = homology_ranks(&specialize(&c, C::new(re, 0.0), Some(0.0))).betti;
        ensure(b == [0, 0, 0], || format!("scale 0.5, Re s = {re}: betti {b:?}"))?;
    }
    let bounds: Vec<String> = d2.bounds.iter().map(|b| format!("{b:.3}")).collect();
    Ok(format!(
        "{literal}; scale 0.5: {} table entries, d^2 = 0 below [{}], betti (0,0,0) at Re s = 2,3,4",
        table.entries.len(),
        bounds.join(", ")
    ))
}

fn rho_surfaces() -> Check {
    let mixed = ManifoldSpec {
        dim: 2,
        periods: vec![0.2, 0.0],
        metric: None,
        terms: vec![
            TrigTerm::new(vec![1, 0], 1.0, 0.0),
            TrigTerm::new(vec![0, 1], 1.0, 0.0),
            TrigTerm::new(vec![1, 1], 0.2, 0.4),
        ],
    };
    let models = [
        ("exact", presets::torus_exact()),
        ("novikov", presets::torus_novikov(0.3, 0.5)),
        ("non-separable", mixed),
    ];
    let mut worst = 0.0f64;
    let mut points = 0;
    for (name, spec) in models {
        let (m, z) = model(spec);
        ensure(!z.is_empty(), || format!("{name}: no zeros"))?;
        for x in z.iter().filter(|c| c.index > 0) {
            let r = estimate_rho(&m, &z, x, &RhoOptions::default(), &FlowOptions::default()).map_err(|e| e.to_string())?;
            ensure(r.rho_hat <= 0.1, || format!("{name} zero {}: rho {}", x.id, r.rho_hat))?;
            worst = worst.max(r.rho_hat);
            points += 1;
        }
    }
    Ok(format!("max rho {worst} over {points} unstable manifolds in 3 models"))
}

fn local_model() -> Check {
    let mut checked = 0;
    for n in 1..=3 {
        for k in 0..=n {
            for q in 0..=n {
                for (c, t) in [(0.5, 3.0), (1.0, 10.0), (1.7, 15.0)] {
                    let vals = local_model_spectrum(&LocalModel { n, q, k, c, t }, 8);
                    for v in &vals {
                        let m = v / (4.0 * c * t);
                        ensure(m >= -1e-12 && (m - m.round()).abs() < 1e-12, || format!("n {n} k {k} q {q}: {v}"))?;
                        checked += 1;
                    }
                    ensure((vals[0] == 0.0) == (q == k), || format!("kernel n {n} k {k} q {q}: {}", vals[0]))?;
                }
            }
        }
    }
    let (m, z) = model(presets::torus_exact());
    let t = 15.0;
    let mut worst = 0.0f64;
    for q in 0..=2 {
        let mut local: Vec<f64> = z.iter().flat_map(|y| local_levels(&y.eigenvalues, q, t, 3)).collect();
        local.sort_by(f64::total_cmp);
        let unit = 2.0 * t * z.iter().map(|y| y.eigenvalues[0].abs()).fold(f64::INFINITY, f64::min);
        let op = build_delta_t(&m, q, t, 48).map_err(|e| e.to_string())?;
        let eig = spectrum(&op, 3, &EigenOptions::default()).map_err(|e| e.to_string())?;
        for (a, b) in eig.values.iter().zip(&local) {
            let rel = if *b > 0.0 { (a - b).abs() / b } else { a.abs() / unit };
            ensure(rel < 0.02, || format!("q {q}: discrete {a} vs local {b}"))?;
            worst = worst.max(rel);
        }
    }
    Ok(format!("{checked} local levels in 4ct N0; torus t = 15 N = 48 first 3 levels within {:.2}%", 100.0 * worst))
}

fn gap_one(name: &str, spec: ManifoldSpec, grid: usize, t_grid: &[f64], gated: bool, notes: &mut Vec<String>) -> Result<(), String> {
    let (m, z) = model(spec);
    let opts = GapOptions { minimax: false, ..Default::default() };
    for q in 0..=m.dim() {
        let rep = verify_gap(&m, &z, q, t_grid, grid, &opts).map_err(|e| e.to_string())?;
        let decay = match rep.small_log_slope {
            Some(s) => format!("{s:.3}"),
            None => "floor".to_string(),
        };
        notes.push(format!("{name} q{q} slope {decay} dev {:.1}%", 100.0 * rep.large_max_rel_dev));
        if !gated {
            continue;
        }
        for e in rep.entries.iter().filter(|e| e.t >= 12.0) {
            ensure(e.small_count == rep.expected_small, || {
                format!("{name} q {q} t {}: {} small, expected {}", e.t, e.small_count, rep.expected_small)
            })?;
        }
        // Small eigenvalues at round-off level have no measurable slope.
        if let Some(s) = rep.small_log_slope {
            ensure(s < -0.05, || format!("{name} q {q}: log slope {s}"))?;
        } else if rep.expected_small > 0 {
            ensure(rep.small_below_floor, || format!("{name} q {q}: no decay fit"))?;
        }
        ensure(rep.large_slope > 0.0 && rep.large_max_rel_dev <= 0.3, || {
            format!("{name} q {q}: large slope {} deviation {}", rep.large_slope, rep.large_max_rel_dev)
        })?;
    }
    Ok(())
}

fn spectral_gap() -> Check {
    let t_grid = [8.0, 12.0, 16.0, 20.0];
    let mut notes = Vec::new();
    gap_one("T1", presets::circle_exact(), 192, &t_grid, true, &mut notes)?;
    gap_one("T2", presets::torus_exact(), 48, &t_grid, true, &mut notes)?;
    gap_one("novikov", presets::torus_novikov(0.3, 0.5), 48, &t_grid, false, &mut notes)?;
    Ok(notes.join("; "))
}

fn quasimodes() -> Check {
    let t_grid = [5.0, 10.0, 15.0, 20.0];
    let mut worst_norm = 0.0f64;
    let mut worst_slope = f64::NEG_INFINITY;
    let mut minimax = Vec::new();
    for (spec, grid) in [(presets::circle_exact(), 192), (presets::torus_exact(), 48)] {
        let (m, z) = model(spec);
        let disc = Discretization::new(&m, grid).map_err(|e| e.to_string())?;
        for y in &z {
            let mut logs = Vec::new();
            for &t in &t_grid {
                let f = build_quasimode(&m, &z, y, t, grid, &QuasimodeOptions::default()).map_err(|e| e.to_string())?;
                worst_norm = worst_norm.max((f.norm() - 1.0).abs());
                logs.push(disc.laplacian(&f, t).norm().ln());
            }
            let (_, slope) = linear_fit(&t_grid, &logs);
            ensure(slope < 0.0, || format!("zero {} of a {}-torus: residual slope {slope}", y.id, m.dim()))?;
            worst_slope = worst_slope.max(slope);
        }
        for q in 0..=m.dim() {
            let mm = minimax_check(&m, &z, q, 20.0, grid, &QuasimodeOptions::default(), &EigenOptions::default())
                .map_err(|e| e.to_string())?;
            ensure(mm.pass, || format!("{}-torus q {q}: mini-max {} >= {}", m.dim(), mm.a, mm.b))?;
            minimax.push(format!("{:.1e}<{:.1}", mm.a, mm.b));
        }
    }
    ensure(worst_norm < 1e-10, || format!("norm error {worst_norm:.2e}"))?;
    Ok(format!(
        "norm error {worst_norm:.1e}, worst residual log-slope {worst_slope:.3}, mini-max at t = 20 [{}]",
        minimax.join(", ")
    ))
}

fn chain_map() -> Check {
    let (m, z) = model(presets::torus_exact());
    let co = ChartOptions::default();
    let charts = build_charts(&m, &z, &co).map_err(|e| e.to_string())?;
    let table = incidence_table(&m, &z, 10.0, &FlowOptions::default()).map_err(|e| e.to_string())?;
    let grid = 32;
    let disc = Discretization::new(&m, grid).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let a = FormField::random_band_limited(2, i % 2, grid, 3, &mut rng);
        let rep = verify_chain_map(&a, C::new(2.0, 0.0), &m, &z, &charts, &table, &disc, &co, 1e-3)
            .map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_residual);
    }
    ensure(worst < 1e-3, || format!("residual {worst:.2e}"))?;
    Ok(format!("max relative residual {worst:.2e} over 10 forms"))
}

fn recovery() -> Check {
    let (m, z) = model(presets::torus_novikov(0.3, 0.5));
    let table = incidence_table(&m, &z, 3.0 * TWO_PI * 0.3, &FlowOptions::default()).map_err(|e| e.to_string())?;
    let c = assemble(&table, &m, &z).map_err(|e| e.to_string())?;
    let rep = recovery_report(&m, &z, &table, &c, &[12.0, 16.0], 48, &RecoveryOptions::default())
        .map_err(|e| e.to_string())?;
    let worst = rep
        .entries
        .iter()
        .filter(|e| e.relative)
        .map(|e| e.error)
        .fold(0.0f64, f64::max);
    ensure(rep.all_within, || format!("relative error {worst:.3e} above 5%"))?;
    ensure(rep.all_fits_match, || "fitted counts differ from trajectory counts".into())?;
    let fitted = rep.fits.iter().filter(|f| f.fitted.is_some()).count();
    Ok(format!(
        "{} entries, max relative error {worst:.2e}, {fitted}/{} integer fits exact",
        rep.entries.len(),
        rep.fits.len()
    ))
}

fn determinism() -> Check {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/torus_novikov.toml");
    let cfg = RunConfig::load(std::path::Path::new(path)).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = RunOptions { out: dir.path().to_path_buf(), target: None, use_cache: false };
    let first = run(&cfg, &opts);
    let second = run(&cfg, &opts);
    ensure(first.exit_code() == 0, || format!("run exit code {}", first.exit_code()))?;
    let (a, b) = (first.payload_json(), second.payload_json());
    ensure(a == b, || "payloads differ".into())?;
    Ok(format!("two uncached runs, identical {}-byte payloads", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Check); 10] = [
        ("ring axioms", 10, ring_axioms),
        ("exact torus", 60, exact_torus),
        ("novikov torus", 300, novikov_torus),
        ("rho on surfaces", 120, rho_surfaces),
        ("local model", 120, local_model),
        ("spectral gap", 600, spectral_gap),
        ("quasimodes", 300, quasimodes),
        ("chain map", 300, chain_map),
        ("recovery", 900, recovery),
        ("determinism", 900, determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= Duration::from_secs(budget) => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget} s budget")),
            Err(e) => (false, e),
        };
        failed += usize::from(!pass);
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {name} ({:.1} s): {detail}", i + 1, took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
