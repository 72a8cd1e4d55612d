//! Kepler two-body problem stabilized on the orbit fixed by its angular
//! momentum `L` and Laplace-Runge-Lenz vector `A`.
//!
//! State vector layout (length 6): position `x`, then velocity `v`.

use std::f64::consts::PI;

use crate::error::{ensure_finite, ensure_len, DomainError, ParamError};
use crate::feedback::{FeedbackSpec, FeedbackSystem, FirstIntegralMap};
use crate::numerics::Vec3;

pub const STATE_DIM: usize = 6;

/// Positions closer to the origin than this are outside the domain.
pub const ORIGIN_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitalState {
    pub x: Vec3,
    pub v: Vec3,
}

impl OrbitalState {
    pub fn new(x: Vec3, v: Vec3) -> Self {
        Self { x, v }
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        Self::new(Vec3::from_slice(&a[..3]), Vec3::from_slice(&a[3..]))
    }

    pub fn from_slice(a: &[f64]) -> Result<Self, DomainError> {
        ensure_len(a, STATE_DIM)?;
        Ok(Self::new(Vec3::from_slice(&a[..3]), Vec3::from_slice(&a[3..])))
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.x.x, self.x.y, self.x.z, self.v.x, self.v.y, self.v.z]
    }

    /// Returns `|x|` after checking finiteness and the origin guard.
    pub fn radius(&self) -> Result<f64, DomainError> {
        ensure_finite(&self.to_array())?;
        let r = self.x.norm();
        if r < ORIGIN_GUARD {
            Err(DomainError::NearOrigin { radius: r })
        } else {
            Ok(r)
        }
    }

    pub fn angular_momentum(&self) -> Vec3 {
        self.x.cross(self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeplerGains {
    pub k1: f64,
    pub k2: f64,
}

impl Default for KeplerGains {
    fn default() -> Self {
        Self { k1: 4.0, k2: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeplerParams {
    pub mu: f64,
    pub gains: KeplerGains,
    pub l0: Vec3,
    pub a0: Vec3,
}

impl KeplerParams {
    /// Requires `L0 _|_ A0`, `L0 != 0` and `|A0| < mu` (a non-degenerate ellipse).
    pub fn new(mu: f64, gains: KeplerGains, l0: Vec3, a0: Vec3) -> Result<Self, ParamError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ParamError::new("mu", "gravitational parameter must be positive"));
        }
        for (name, k) in [("k1", gains.k1), ("k2", gains.k2)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(ParamError::new(name, format!("gain {k} is not positive")));
            }
        }
        if !(l0.norm() > 0.0 && l0.is_finite() && a0.is_finite()) {
            return Err(ParamError::new("l0", "angular momentum must be nonzero"));
        }
        if l0.dot(a0).abs() > 1e-12 * l0.norm() * a0.norm() {
            return Err(ParamError::new("a0", "must be orthogonal to l0"));
        }
        if a0.norm() >= mu {
            return Err(ParamError::new("a0", "|A0| >= mu: orbit is not elliptic"));
        }
        Ok(Self { mu, gains, l0, a0 })
    }

    pub fn from_initial_state(mu: f64, gains: KeplerGains, s0: &OrbitalState) -> Result<Self, ParamError> {
        let inv = kepler_invariants_mu(mu, s0)
            .map_err(|e| ParamError::new("initial_state", e.to_string()))?;
        // tiny roundoff in L.A would trip the orthogonality check; remove it
        let a0 = remove_component(inv.a, inv.l);
        Self::new(mu, gains, inv.l, a0)
    }

    /// `mu = 1`, `x(0) = (1, 0, 0)`, `v(0) = (0, sqrt(1.8), 0)`, gains 4 and 2.
    pub fn standard_setup() -> (Self, OrbitalState) {
        let s0 = standard_initial_state();
        let p = Self::from_initial_state(1.0, KeplerGains::default(), &s0).expect("valid defaults");
        (p, s0)
    }

    pub fn feedback_spec(&self) -> FeedbackSpec {
        let mut reference = self.l0.to_array().to_vec();
        reference.extend(self.a0.to_array());
        FeedbackSpec::from_blocks(reference, &[(3, self.gains.k1), (3, self.gains.k2)])
            .expect("validated gains are positive")
    }
}

fn remove_component(a: Vec3, dir: Vec3) -> Vec3 {
    let n2 = dir.norm_squared();
    if n2 == 0.0 {
        a
    } else {
        a - dir * (a.dot(dir) / n2)
    }
}

pub fn standard_initial_state() -> OrbitalState {
    OrbitalState::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.8f64.sqrt(), 0.0))
}

/// `(v, -mu x / |x|^3)`.
pub fn kepler_field(params: &KeplerParams, s: &OrbitalState) -> Result<OrbitalState, DomainError> {
    let r = s.radius()?;
    Ok(OrbitalState::new(s.v, s.x * (-params.mu / (r * r * r))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeplerInvariants {
    pub l: Vec3,
    pub a: Vec3,
    pub energy: f64,
}

pub fn kepler_invariants(params: &KeplerParams, s: &OrbitalState) -> Result<KeplerInvariants, DomainError> {
    kepler_invariants_mu(params.mu, s)
}

fn kepler_invariants_mu(mu: f64, s: &OrbitalState) -> Result<KeplerInvariants, DomainError> {
    let r = s.radius()?;
    let l = s.angular_momentum();
    Ok(KeplerInvariants {
        l,
        a: s.v.cross(l) - s.x * (mu / r),
        energy: 0.5 * s.v.norm_squared() - mu / r,
    })
}

/// `k1/2 |L - L0|^2 + k2/2 |A - A0|^2`.
pub fn kepler_lyapunov(params: &KeplerParams, s: &OrbitalState) -> Result<f64, DomainError> {
    let inv = kepler_invariants(params, s)?;
    Ok(0.5 * params.gains.k1 * (inv.l - params.l0).norm_squared()
        + 0.5 * params.gains.k2 * (inv.a - params.a0).norm_squared())
}

pub fn kepler_lyapunov_gradient(params: &KeplerParams, s: &OrbitalState) -> Result<OrbitalState, DomainError> {
    let r = s.radius()?;
    let inv = kepler_invariants(params, s)?;
    let (k1, k2, mu) = (params.gains.k1, params.gains.k2, params.mu);
    let dl = inv.l - params.l0;
    let da = inv.a - params.a0;
    let (x, v) = (s.x, s.v);
    let grad_x = v.cross(dl) * k1
        + (v.cross(da.cross(v)) - da * (mu / r) + x * (mu / (r * r * r) * x.dot(da))) * k2;
    let grad_v = dl.cross(x) * k1 + (inv.l.cross(da) + x.cross(v.cross(da))) * k2;
    Ok(OrbitalState::new(grad_x, grad_v))
}

pub fn kepler_modified_field(params: &KeplerParams, s: &OrbitalState) -> Result<OrbitalState, DomainError> {
    let f = kepler_field(params, s)?;
    let g = kepler_lyapunov_gradient(params, s)?;
    Ok(OrbitalState::new(f.x - g.x, f.v - g.v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitGeometry {
    pub semi_major_axis: f64,
    pub eccentricity: f64,
    pub period: f64,
}

/// Semi-major axis, eccentricity and period of the reference ellipse.
pub fn orbit_geometry(params: &KeplerParams) -> Result<OrbitGeometry, ParamError> {
    let mu = params.mu;
    let a_norm = params.a0.norm();
    if a_norm >= mu {
        return Err(ParamError::new("a0", "parabolic or hyperbolic orbit"));
    }
    let energy = (a_norm * a_norm - mu * mu) / (2.0 * params.l0.norm_squared());
    let a = -mu / (2.0 * energy);
    Ok(OrbitGeometry {
        semi_major_axis: a,
        eccentricity: a_norm / mu,
        period: 2.0 * PI * (a * a * a / mu).sqrt(),
    })
}

/// `min { k1 |L0|^2 / 2, k2 (mu - |A0|)^2 / 2 }`.
pub fn kepler_gain_bound(params: &KeplerParams) -> f64 {
    let g = params.gains;
    (0.5 * g.k1 * params.l0.norm_squared()).min(0.5 * g.k2 * (params.mu - params.a0.norm()).powi(2))
}

/// Unit vectors `(P, Q)` spanning the orbital plane, `P` towards perihelion.
pub fn perifocal_basis(l0: Vec3, a0: Vec3) -> (Vec3, Vec3) {
    let l_hat = l0 * (1.0 / l0.norm());
    let p = if a0.norm() > 0.0 {
        a0 * (1.0 / a0.norm())
    } else {
        // circular: any in-plane direction
        let trial = if l_hat.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
        let p = remove_component(trial, l_hat);
        p * (1.0 / p.norm())
    };
    (p, l_hat.cross(p))
}

/// Solves `E - e sin E = M` by Newton iteration to 1e-14.
pub fn eccentric_anomaly(mean_anomaly: f64, e: f64) -> f64 {
    let m = mean_anomaly.rem_euclid(2.0 * PI);
    let mut ea = if e < 0.8 { m } else { PI };
    for _ in 0..100 {
        let f = ea - e * ea.sin() - m;
        let step = f / (1.0 - e * ea.cos());
        ea -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    ea
}

/// Point of the reference orbit at the given mean anomaly (0 = perihelion).
pub fn orbit_point(params: &KeplerParams, mean_anomaly: f64) -> Result<OrbitalState, ParamError> {
    let geo = orbit_geometry(params)?;
    let (a, e, mu) = (geo.semi_major_axis, geo.eccentricity, params.mu);
    let (p, q) = perifocal_basis(params.l0, params.a0);
    let ea = eccentric_anomaly(mean_anomaly, e);
    let (s, c) = ea.sin_cos();
    let root = (1.0 - e * e).sqrt();
    let r = a * (1.0 - e * c);
    let x = p * (a * (c - e)) + q * (a * root * s);
    let v = (p * (-s) + q * (root * c)) * ((mu * a).sqrt() / r);
    Ok(OrbitalState::new(x, v))
}

impl FeedbackSystem<STATE_DIM> for KeplerParams {
    fn field(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        Ok(kepler_field(self, &OrbitalState::from_array(x))?.to_array())
    }

    fn lyapunov(&self, x: &[f64; STATE_DIM]) -> Result<f64, DomainError> {
        kepler_lyapunov(self, &OrbitalState::from_array(x))
    }

    fn lyapunov_gradient(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        Ok(kepler_lyapunov_gradient(self, &OrbitalState::from_array(x))?.to_array())
    }

    fn modified_field(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        Ok(kepler_modified_field(self, &OrbitalState::from_array(x))?.to_array())
    }

    fn gain_bound(&self) -> Option<f64> {
        Some(kepler_gain_bound(self))
    }
}

/// `D(L . w_l + A . w_a)` written in expanded (dot-product) form.
fn la_transpose(mu: f64, s: &OrbitalState, w_l: Vec3, w_a: Vec3) -> Result<Vec<f64>, DomainError> {
    let r = s.radius()?;
    let (x, v) = (s.x, s.v);
    let grad_x = v.cross(w_l) + w_a * v.norm_squared() - v * v.dot(w_a)
        - (w_a * (1.0 / r) - x * (x.dot(w_a) / (r * r * r))) * mu;
    let grad_v = w_l.cross(x) + v * (2.0 * x.dot(w_a)) - w_a * x.dot(v) - x * v.dot(w_a);
    Ok(OrbitalState::new(grad_x, grad_v).to_array().to_vec())
}

/// `(L, A)`: six values. `L . A = 0` identically, so `Df` has rank at most 5.
#[derive(Debug, Clone, Copy)]
pub struct KeplerIntegrals {
    pub mu: f64,
}

impl FirstIntegralMap for KeplerIntegrals {
    fn dim_state(&self) -> usize {
        STATE_DIM
    }

    fn dim_values(&self) -> usize {
        6
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
        let inv = kepler_invariants_mu(self.mu, &OrbitalState::from_slice(x)?)?;
        let mut out = inv.l.to_array().to_vec();
        out.extend(inv.a.to_array());
        Ok(out)
    }

    fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
        ensure_len(w, 6)?;
        la_transpose(self.mu, &OrbitalState::from_slice(x)?, Vec3::from_slice(&w[..3]), Vec3::from_slice(&w[3..]))
    }
}

/// `(L, A . P, A . Q)` with `(P, Q)` the perifocal basis of the reference
/// orbit. Drops the out-of-plane component of `A`, which is fixed by `L`,
/// leaving five independent constraints for projection.
#[derive(Debug, Clone, Copy)]
pub struct KeplerConstraint {
    pub mu: f64,
    pub p: Vec3,
    pub q: Vec3,
}

impl KeplerConstraint {
    pub fn new(params: &KeplerParams) -> Self {
        let (p, q) = perifocal_basis(params.l0, params.a0);
        Self { mu: params.mu, p, q }
    }

    pub fn target(&self, params: &KeplerParams) -> Vec<f64> {
        let mut t = params.l0.to_array().to_vec();
        t.push(params.a0.dot(self.p));
        t.push(params.a0.dot(self.q));
        t
    }
}

impl FirstIntegralMap for KeplerConstraint {
    fn dim_state(&self) -> usize {
        STATE_DIM
    }

    fn dim_values(&self) -> usize {
        5
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
        let inv = kepler_invariants_mu(self.mu, &OrbitalState::from_slice(x)?)?;
        let mut out = inv.l.to_array().to_vec();
        out.push(inv.a.dot(self.p));
        out.push(inv.a.dot(self.q));
        Ok(out)
    }

    fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
        ensure_len(w, 5)?;
        let w_a = self.p * w[3] + self.q * w[4];
        la_transpose(self.mu, &OrbitalState::from_slice(x)?, Vec3::from_slice(&w[..3]), w_a)
    }
}
