//! Free rigid body with the attitude extended from SO(3) to all 3x3 matrices.
//!
//! State vector layout (length 12): the nine entries of `R` row by row, then
//! the body angular velocity `Omega`. The inertia tensor is diagonal in the
//! body frame.

use crate::error::{ensure_finite, DomainError, ParamError};
use crate::feedback::{FeedbackSpec, FeedbackSystem, FirstIntegralMap};
use crate::numerics::{axis_rotation, frobenius_norm, hat, Mat3, Vec3};

pub const STATE_DIM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyState {
    pub r: Mat3,
    pub omega: Vec3,
}

impl RigidBodyState {
    pub fn new(r: Mat3, omega: Vec3) -> Self {
        Self { r, omega }
    }

    pub fn from_array(x: &[f64; STATE_DIM]) -> Self {
        Self {
            r: Mat3::from_row_slice(&x[..9]),
            omega: Vec3::from_slice(&x[9..]),
        }
    }

    pub fn from_slice(x: &[f64]) -> Result<Self, DomainError> {
        crate::error::ensure_len(x, STATE_DIM)?;
        Ok(Self {
            r: Mat3::from_row_slice(&x[..9]),
            omega: Vec3::from_slice(&x[9..]),
        })
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[..9].copy_from_slice(&self.r.to_row_array());
        out[9..].copy_from_slice(&self.omega.to_array());
        out
    }

    /// Checks finiteness and `det(R) > 0`.
    pub fn validate(&self) -> Result<(), DomainError> {
        ensure_finite(&self.to_array())?;
        let det = self.r.determinant();
        if det > 0.0 {
            Ok(())
        } else {
            Err(DomainError::NonPositiveDeterminant { det })
        }
    }

    /// `||R^T R - I||`.
    pub fn orthogonality_defect(&self) -> f64 {
        frobenius_norm(&(self.r.transpose() * self.r - Mat3::IDENTITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyGains {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for RigidBodyGains {
    fn default() -> Self {
        Self {
            k0: 50.0,
            k1: 100.0,
            k2: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyParams {
    /// Principal moments of inertia.
    pub inertia: Vec3,
    pub gains: RigidBodyGains,
    /// Target kinetic energy.
    pub e0: f64,
    /// Target spatial angular momentum.
    pub pi0: Vec3,
}

impl RigidBodyParams {
    pub fn new(inertia: Vec3, gains: RigidBodyGains, e0: f64, pi0: Vec3) -> Result<Self, ParamError> {
        if !(inertia.x > 0.0 && inertia.y > 0.0 && inertia.z > 0.0 && inertia.is_finite()) {
            return Err(ParamError::new("inertia", "principal moments must be positive"));
        }
        for (name, k) in [("k0", gains.k0), ("k1", gains.k1), ("k2", gains.k2)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(ParamError::new(name, format!("gain {k} is not positive")));
            }
        }
        if !(e0 > 0.0 && e0.is_finite()) {
            return Err(ParamError::new("e0", "target energy must be positive"));
        }
        if !(pi0.norm() > 0.0 && pi0.is_finite()) {
            return Err(ParamError::new("pi0", "target momentum must be nonzero"));
        }
        Ok(Self {
            inertia,
            gains,
            e0,
            pi0,
        })
    }

    /// Targets taken from an initial state, which must have nonzero angular velocity.
    pub fn from_initial_state(
        inertia: Vec3,
        gains: RigidBodyGains,
        s0: &RigidBodyState,
    ) -> Result<Self, ParamError> {
        let (e0, pi0) = rb_integrals(inertia, s0);
        Self::new(inertia, gains, e0, pi0)
    }

    /// Inertia diag(3, 2, 1), default gains, R(0) = I, Omega(0) = (1, 1, 1).
    pub fn standard_setup() -> (Self, RigidBodyState) {
        let s0 = standard_initial_state();
        let params = Self::from_initial_state(Vec3::new(3.0, 2.0, 1.0), RigidBodyGains::default(), &s0)
            .expect("default parameters are valid");
        (params, s0)
    }

    /// Stacked `(R^T R - I, E, pi)` map with matching gains.
    pub fn feedback_spec(&self) -> FeedbackSpec {
        let mut reference = vec![0.0; 9];
        reference.push(self.e0);
        reference.extend(self.pi0.to_array());
        FeedbackSpec::from_blocks(
            reference,
            &[(9, 0.5 * self.gains.k0), (1, self.gains.k1), (3, self.gains.k2)],
        )
        .expect("validated gains are positive")
    }

    /// Projection constraint data: independent entries of `R^T R - I`, then `E`, then `pi`.
    pub fn constraint_target(&self) -> Vec<f64> {
        let mut t = vec![0.0; 6];
        t.push(self.e0);
        t.extend(self.pi0.to_array());
        t
    }
}

pub fn standard_initial_state() -> RigidBodyState {
    RigidBodyState::new(Mat3::IDENTITY, Vec3::new(1.0, 1.0, 1.0))
}

/// `(R hat(Omega), I^-1 ((I Omega) x Omega))`.
pub fn rb_field(params: &RigidBodyParams, s: &RigidBodyState) -> RigidBodyState {
    let i = params.inertia;
    let m = i.component_mul(s.omega);
    RigidBodyState {
        r: s.r * hat(s.omega),
        omega: m.cross(s.omega).component_div(i),
    }
}

/// Kinetic energy `1/2 Omega^T I Omega` and spatial momentum `R I Omega`.
pub fn rb_integrals(inertia: Vec3, s: &RigidBodyState) -> (f64, Vec3) {
    let m = inertia.component_mul(s.omega);
    (0.5 * s.omega.dot(m), s.r * m)
}

/// `k0/4 ||R^T R - I||^2 + k1/2 |E - E0|^2 + k2/2 |pi - pi0|^2`.
pub fn rb_lyapunov(params: &RigidBodyParams, s: &RigidBodyState) -> Result<f64, DomainError> {
    s.validate()?;
    let g = params.gains;
    let (e, pi) = rb_integrals(params.inertia, s);
    let orth = s.orthogonality_defect();
    Ok(0.25 * g.k0 * orth * orth
        + 0.5 * g.k1 * (e - params.e0).powi(2)
        + 0.5 * g.k2 * (pi - params.pi0).norm_squared())
}

/// Closed-form `(grad_R V, grad_Omega V)`.
pub fn rb_lyapunov_gradient(params: &RigidBodyParams, s: &RigidBodyState) -> RigidBodyState {
    let g = params.gains;
    let m = params.inertia.component_mul(s.omega);
    let (e, pi) = rb_integrals(params.inertia, s);
    let dpi = pi - params.pi0;
    let rtr_i = s.r.transpose() * s.r - Mat3::IDENTITY;
    RigidBodyState {
        r: (s.r * rtr_i).scale(g.k0) + dpi.outer(m).scale(g.k2),
        omega: m * (g.k1 * (e - params.e0))
            + params.inertia.component_mul(s.r.transpose() * dpi) * g.k2,
    }
}

pub fn rb_modified_field(params: &RigidBodyParams, s: &RigidBodyState) -> RigidBodyState {
    let x = rb_field(params, s);
    let g = rb_lyapunov_gradient(params, s);
    RigidBodyState {
        r: x.r - g.r,
        omega: x.omega - g.omega,
    }
}

/// Exact flow of the single-axis piece of the kinetic energy for time `tau`:
/// the body momentum turns by `-tau * Omega_axis` and the attitude by
/// `+tau * Omega_axis` about that axis, so `pi = R I Omega` is unchanged.
fn axis_flow(inertia: Vec3, s: &RigidBodyState, axis: usize, tau: f64) -> RigidBodyState {
    let angle = tau * s.omega[axis];
    let m = inertia.component_mul(s.omega);
    let m = axis_rotation(axis, -angle) * m;
    RigidBodyState {
        r: s.r * axis_rotation(axis, angle),
        omega: m.component_div(inertia),
    }
}

/// Symmetric three-rotation splitting: axes 1, 2 for `h/2`, axis 3 for `h`,
/// then axes 2, 1 for `h/2`. Second order; `R` stays orthogonal to roundoff.
pub fn rb_splitting_step(params: &RigidBodyParams, s: &RigidBodyState, h: f64) -> RigidBodyState {
    let i = params.inertia;
    let s = axis_flow(i, s, 0, 0.5 * h);
    let s = axis_flow(i, &s, 1, 0.5 * h);
    let s = axis_flow(i, &s, 2, h);
    let s = axis_flow(i, &s, 1, 0.5 * h);
    axis_flow(i, &s, 0, 0.5 * h)
}

/// `min { k0/4, k1 |E0| / 2, k2 |pi0|^2 / 2 }`.
pub fn rb_gain_bound(params: &RigidBodyParams) -> f64 {
    let g = params.gains;
    (0.25 * g.k0)
        .min(0.5 * g.k1 * params.e0.abs())
        .min(0.5 * g.k2 * params.pi0.norm_squared())
}

impl FeedbackSystem<STATE_DIM> for RigidBodyParams {
    fn field(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        ensure_finite(x)?;
        Ok(rb_field(self, &RigidBodyState::from_array(x)).to_array())
    }

    fn lyapunov(&self, x: &[f64; STATE_DIM]) -> Result<f64, DomainError> {
        rb_lyapunov(self, &RigidBodyState::from_array(x))
    }

    fn lyapunov_gradient(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        ensure_finite(x)?;
        Ok(rb_lyapunov_gradient(self, &RigidBodyState::from_array(x)).to_array())
    }

    fn modified_field(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        ensure_finite(x)?;
        Ok(rb_modified_field(self, &RigidBodyState::from_array(x)).to_array())
    }

    fn gain_bound(&self) -> Option<f64> {
        Some(rb_gain_bound(self))
    }
}

/// `(vec(R^T R - I), E, pi)`: 13 values, used with block gains `(k0/2, k1, k2)`.
#[derive(Debug, Clone, Copy)]
pub struct RigidBodyIntegrals {
    pub inertia: Vec3,
}

/// Upper-triangle index pairs of a symmetric 3x3 matrix.
const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// `(sym(R^T R - I), E, pi)` with only the six independent entries of the
/// symmetric block: 10 values, full rank near SO(3) x R^3.
#[derive(Debug, Clone, Copy)]
pub struct RigidBodyConstraint {
    pub inertia: Vec3,
}

fn integral_tail(inertia: Vec3, s: &RigidBodyState, out: &mut Vec<f64>) {
    let (e, pi) = rb_integrals(inertia, s);
    out.push(e);
    out.extend(pi.to_array());
}

/// `D(E, pi)^T (w_e, w_pi)` plus the attitude part `R (W + W^T)` for a weight matrix `W`.
fn integral_tail_transpose(inertia: Vec3, s: &RigidBodyState, w_sym: Mat3, w_e: f64, w_pi: Vec3) -> Vec<f64> {
    let m = inertia.component_mul(s.omega);
    let grad_r = s.r * (w_sym + w_sym.transpose()) + w_pi.outer(m);
    let grad_omega = m * w_e + inertia.component_mul(s.r.transpose() * w_pi);
    RigidBodyState::new(grad_r, grad_omega).to_array().to_vec()
}

impl FirstIntegralMap for RigidBodyIntegrals {
    fn dim_state(&self) -> usize {
        STATE_DIM
    }

    fn dim_values(&self) -> usize {
        13
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
        let s = RigidBodyState::from_slice(x)?;
        ensure_finite(x)?;
        let mut out = (s.r.transpose() * s.r - Mat3::IDENTITY).to_row_array().to_vec();
        integral_tail(self.inertia, &s, &mut out);
        Ok(out)
    }

    fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
        let s = RigidBodyState::from_slice(x)?;
        crate::error::ensure_len(w, 13)?;
        let w_sym = Mat3::from_row_slice(&w[..9]);
        Ok(integral_tail_transpose(self.inertia, &s, w_sym, w[9], Vec3::from_slice(&w[10..])))
    }
}

impl FirstIntegralMap for RigidBodyConstraint {
    fn dim_state(&self) -> usize {
        STATE_DIM
    }

    fn dim_values(&self) -> usize {
        10
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
        let s = RigidBodyState::from_slice(x)?;
        ensure_finite(x)?;
        let d = s.r.transpose() * s.r - Mat3::IDENTITY;
        let mut out: Vec<f64> = UPPER.iter().map(|&(i, j)| d.m[i][j]).collect();
        integral_tail(self.inertia, &s, &mut out);
        Ok(out)
    }

    fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
        let s = RigidBodyState::from_slice(x)?;
        crate::error::ensure_len(w, 10)?;
        let mut w_sym = Mat3::ZERO;
        for (&(i, j), wi) in UPPER.iter().zip(w) {
            w_sym.m[i][j] = *wi;
        }
        Ok(integral_tail_transpose(self.inertia, &s, w_sym, w[6], Vec3::from_slice(&w[7..])))
    }
}
