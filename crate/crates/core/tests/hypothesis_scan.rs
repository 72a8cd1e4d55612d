//! Root finding in the circular-orbit hypothesis check against a dense scan.

use feedint::perturbed_kepler::{pk_check_hypothesis, CubicPerturbedPotential, PerturbedKeplerGains, PerturbedKeplerParams, RadialPotential};
use feedint::kepler::OrbitalState;
use feedint::numerics::Vec3;

/// Sign changes of `r^3 U'(r) - |L0|^2` on a log grid of `n` points.
fn dense_sign_changes(p: &PerturbedKeplerParams, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let l2 = p.l0.norm_squared();
    let g = |r: f64| r * r * r * p.potential.u_prime(r) - l2;
    let step = (hi / lo).ln() / (n - 1) as f64;
    let mut out = Vec::new();
    let mut prev = (lo, g(lo));
    for i in 1..n {
        let r = lo * (step * i as f64).exp();
        let cur = (r, g(r));
        if (prev.1 < 0.0) != (cur.1 < 0.0) {
            out.push((prev.0, cur.0));
        }
        prev = cur;
    }
    out
}

fn params(delta: f64, e: f64, speed_scale: f64) -> PerturbedKeplerParams {
    let s0 = OrbitalState::new(Vec3::new(1.0 - e, 0.0, 0.0), Vec3::new(0.0, speed_scale * ((1.0 + e) / (1.0 - e)).sqrt(), 0.0));
    PerturbedKeplerParams::from_initial_state(CubicPerturbedPotential { mu: 1.0, delta }, PerturbedKeplerGains::default(), &s0).unwrap()
}

#[test]
fn no_sign_change_missed_on_potential_family() {
    for delta in [0.0, 1e-4, 0.0025, 0.01, 0.05] {
        for e in [0.1, 0.3, 0.6, 0.8] {
            for scale in [0.7, 1.0] {
                let p = params(delta, e, scale);
                let dense = dense_sign_changes(&p, 1e-3, 1e3, 1_000_000);
                let rep = pk_check_hypothesis(&p, 1e-3, 1e3, 2000).unwrap();
                assert_eq!(rep.roots.len(), dense.len(), "delta {delta} e {e} scale {scale}");
                for (root, (lo, hi)) in rep.roots.iter().zip(&dense) {
                    assert!(root.radius >= *lo - 1e-12 && root.radius <= *hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn default_data_roots_match_dense_scan() {
    let (p, _) = PerturbedKeplerParams::standard_setup();
    let dense = dense_sign_changes(&p, 1e-3, 1e3, 1_000_000);
    assert_eq!(dense.len(), 2);
    let rep = pk_check_hypothesis(&p, 1e-3, 1e3, 1000).unwrap();
    assert_eq!(rep.bracket, (1e-3, 1e3));
    assert!((rep.roots[0].energy_residual - 692.72).abs() < 0.01);
    assert!((rep.roots[1].energy_residual - 0.252).abs() < 1e-3);
}
