//! Property suites over random states and reference-flow conservation checks.

use feedint::diagnostics::sampling;
use feedint::feedback::{FeedbackSystem, FirstIntegralMap};
use feedint::integrators::rk4_step;
use feedint::kepler::{self, kepler_invariants, KeplerParams, OrbitalState};
use feedint::numerics::{rotation_from_axis_angle, Vec3};
use feedint::perturbed_kepler::{self, pk_invariants, CubicPerturbedPotential, PerturbedKeplerParams};
use feedint::rigid_body::{RigidBodyParams, RigidBodyState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn orbital() -> impl Strategy<Value = OrbitalState> {
    (vec3(3.0), vec3(2.0))
        .prop_filter("away from the origin", |(x, _)| x.norm() > 0.1)
        .prop_map(|(x, v)| OrbitalState::new(x, v))
}

/// `dV/dt` along the modified field by central differences.
fn lyapunov_rate<const N: usize, S: FeedbackSystem<N>>(system: &S, x: &[f64; N]) -> (f64, f64) {
    let d = system.modified_field(x).unwrap();
    let g = system.lyapunov_gradient(x).unwrap();
    let eps = 1e-7;
    let at = |t: f64| {
        let mut y = *x;
        for (yi, di) in y.iter_mut().zip(&d) {
            *yi += t * di;
        }
        system.lyapunov(&y).unwrap()
    };
    let rate = (at(eps) - at(-eps)) / (2.0 * eps);
    (rate, -g.iter().map(|v| v * v).sum::<f64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn kepler_relation_holds(s in orbital()) {
        let (p, _) = KeplerParams::standard_setup();
        let inv = kepler_invariants(&p, &s).unwrap();
        let lhs = inv.a.norm_squared();
        let rhs = p.mu * p.mu + 2.0 * inv.energy * inv.l.norm_squared();
        let scale = lhs.abs() + p.mu * p.mu + (2.0 * inv.energy * inv.l.norm_squared()).abs();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        prop_assert!(inv.l.dot(inv.a).abs() <= 1e-12 * (1.0 + inv.l.norm() * inv.a.norm()));
    }

    #[test]
    fn perturbed_invariants_are_rotation_equivariant(s in orbital(), axis in vec3(3.0)) {
        let (p, _) = PerturbedKeplerParams::standard_setup();
        let q = rotation_from_axis_angle(axis);
        let rotated = OrbitalState::new(q.mul_vec(s.x), q.mul_vec(s.v));
        let (e, l) = pk_invariants(&p, &s).unwrap();
        let (er, lr) = pk_invariants(&p, &rotated).unwrap();
        prop_assert!((e - er).abs() <= 1e-12 * (1.0 + e.abs()));
        prop_assert!((q.mul_vec(l) - lr).norm() <= 1e-12 * (1.0 + l.norm()));
    }

    #[test]
    fn unperturbed_potential_reproduces_kepler_field(s in orbital()) {
        let (k, _) = KeplerParams::standard_setup();
        let (mut p, _) = PerturbedKeplerParams::standard_setup();
        p.potential = CubicPerturbedPotential { mu: k.mu, delta: 0.0 };
        let a = kepler::kepler_field(&k, &s).unwrap();
        let b = perturbed_kepler::pk_field(&p, &s).unwrap();
        prop_assert!((a.x - b.x).norm() <= 1e-14 * (1.0 + a.x.norm()));
        prop_assert!((a.v - b.v).norm() <= 1e-14 * (1.0 + a.v.norm()));
    }

    #[test]
    fn lyapunov_decays_at_gradient_rate_for_orbits(s in orbital()) {
        let (k, _) = KeplerParams::standard_setup();
        let (p, _) = PerturbedKeplerParams::standard_setup();
        for (rate, expected) in [lyapunov_rate(&k, &s.to_array()), lyapunov_rate(&p, &s.to_array())] {
            prop_assert!(expected <= 0.0);
            prop_assert!((rate - expected).abs() <= 1e-5 * (1.0 + expected.abs()), "{} vs {}", rate, expected);
        }
    }
}

#[test]
fn lyapunov_decays_at_gradient_rate_for_rigid_body() {
    let (p, _) = RigidBodyParams::standard_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let s = sampling::rigid_body_state(&mut rng).to_array();
        let (rate, expected) = lyapunov_rate(&p, &s);
        assert!(expected <= 0.0);
        assert!((rate - expected).abs() <= 1e-5 * (1.0 + expected.abs()), "{rate} vs {expected}");
    }
}

#[test]
fn rank_of_constraint_maps_on_random_states() {
    let (p, _) = RigidBodyParams::standard_setup();
    let c = feedint::rigid_body::RigidBodyConstraint { inertia: p.inertia };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<Vec<f64>> = (0..200).map(|_| sampling::rigid_body_state(&mut rng).to_array().to_vec()).collect();
    let rep = feedint::diagnostics::check_rank_condition(&c, &samples).unwrap();
    assert_eq!(rep.required_rank, c.dim_values());
    assert_eq!(rep.per_sample_min.len(), 200);
}

#[test]
fn kepler_reference_flow_conserves_integrals_for_one_period() {
    let (p, s0) = KeplerParams::standard_setup();
    let period = kepler::orbit_geometry(&p).unwrap().period;
    let h = 1e-4;
    let field = |x: &[f64; 6]| p.field(x);
    let inv0 = kepler_invariants(&p, &s0).unwrap();
    let mut x = s0.to_array();
    let (mut dl, mut da): (f64, f64) = (0.0, 0.0);
    for _ in 0..(period / h).round() as usize {
        x = rk4_step(&field, &x, h).unwrap();
        let inv = kepler_invariants(&p, &OrbitalState::from_array(&x)).unwrap();
        dl = dl.max((inv.l - inv0.l).norm());
        da = da.max((inv.a - inv0.a).norm());
    }
    assert!(dl <= 1e-10, "dL = {dl:e}");
    assert!(da <= 1e-9, "dA = {da:e}");
    // back at the start after one period
    assert!((OrbitalState::from_array(&x).x - s0.x).norm() < 1e-3);
}

#[test]
fn perturbed_reference_flow_conserves_integrals() {
    let (p, s0) = PerturbedKeplerParams::standard_setup();
    let h = 1e-4;
    let field = |x: &[f64; 6]| p.field(x);
    let mut x = s0.to_array();
    let (mut de, mut dl): (f64, f64) = (0.0, 0.0);
    for _ in 0..200_000 {
        x = rk4_step(&field, &x, h).unwrap();
        let (e, l) = pk_invariants(&p, &OrbitalState::from_array(&x)).unwrap();
        de = de.max((e - p.e0).abs());
        dl = dl.max((l - p.l0).norm());
    }
    assert!(de <= 1e-10, "dE = {de:e}");
    assert!(dl <= 1e-10, "dL = {dl:e}");
}

#[test]
fn orbit_sampling_covers_level_set() {
    let (p, _) = KeplerParams::standard_setup();
    let mut max_v: f64 = 0.0;
    for k in 0..500 {
        let s = kepler::orbit_point(&p, 0.0125 * k as f64).unwrap();
        max_v = max_v.max(p.lyapunov(&s.to_array()).unwrap());
    }
    assert!(max_v <= 1e-20, "{max_v:e}");
}

#[test]
fn rigid_body_states_from_sampler_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let s: RigidBodyState = sampling::rigid_body_state(&mut rng);
        assert!(s.validate().is_ok());
    }
}
