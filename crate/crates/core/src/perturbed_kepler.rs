//! Motion in a rotationally symmetric radial potential `U(|x|)`, stabilized on
//! a level set of the energy `E` and angular momentum `L`.
//!
//! Uses the same 6-component state layout as [`crate::kepler`].

use crate::error::{ensure_len, DomainError, ParamError};
use crate::feedback::{FeedbackSpec, FeedbackSystem, FirstIntegralMap};
use crate::integrators::{rk4_step, StepError};
use crate::kepler::{OrbitalState, STATE_DIM};
use crate::numerics::{hat, Vec3};

/// A potential depending only on the radius, with its analytic derivative.
pub trait RadialPotential {
    fn u(&self, r: f64) -> f64;
    fn u_prime(&self, r: f64) -> f64;
}

/// `U(r) = -mu / r - delta / r^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicPerturbedPotential {
    pub mu: f64,
    pub delta: f64,
}

impl RadialPotential for CubicPerturbedPotential {
    fn u(&self, r: f64) -> f64 {
        -self.mu / r - self.delta / (r * r * r)
    }

    fn u_prime(&self, r: f64) -> f64 {
        let r2 = r * r;
        self.mu / r2 + 3.0 * self.delta / (r2 * r2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedKeplerGains {
    pub k1: f64,
    pub k2: f64,
}

impl Default for PerturbedKeplerGains {
    fn default() -> Self {
        Self { k1: 2.0, k2: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedKeplerParams<P = CubicPerturbedPotential> {
    pub potential: P,
    pub gains: PerturbedKeplerGains,
    pub e0: f64,
    pub l0: Vec3,
}

impl<P: RadialPotential> PerturbedKeplerParams<P> {
    pub fn new(potential: P, gains: PerturbedKeplerGains, e0: f64, l0: Vec3) -> Result<Self, ParamError> {
        for (name, k) in [("k1", gains.k1), ("k2", gains.k2)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(ParamError::new(name, format!("gain {k} is not positive")));
            }
        }
        if !e0.is_finite() {
            return Err(ParamError::new("e0", "non-finite target energy"));
        }
        if !(l0.norm() > 0.0 && l0.is_finite()) {
            return Err(ParamError::new("l0", "angular momentum must be nonzero"));
        }
        Ok(Self {
            potential,
            gains,
            e0,
            l0,
        })
    }

    pub fn from_initial_state(potential: P, gains: PerturbedKeplerGains, s0: &OrbitalState) -> Result<Self, ParamError> {
        let (e0, l0) = invariants(&potential, s0).map_err(|e| ParamError::new("initial_state", e.to_string()))?;
        Self::new(potential, gains, e0, l0)
    }

    pub fn feedback_spec(&self) -> FeedbackSpec {
        let mut reference = vec![self.e0];
        reference.extend(self.l0.to_array());
        FeedbackSpec::from_blocks(reference, &[(1, self.gains.k1), (3, self.gains.k2)])
            .expect("validated gains are positive")
    }
}

impl PerturbedKeplerParams<CubicPerturbedPotential> {
    /// `mu = 1`, `delta = 0.0025`, eccentricity 0.6 start at perihelion, gains 2 and 3.
    pub fn standard_setup() -> (Self, OrbitalState) {
        let s0 = standard_initial_state(0.6);
        let pot = CubicPerturbedPotential { mu: 1.0, delta: 0.0025 };
        let p = Self::from_initial_state(pot, PerturbedKeplerGains::default(), &s0).expect("valid defaults");
        (p, s0)
    }
}

/// `x(0) = (1 - e, 0, 0)`, `v(0) = (0, sqrt((1 + e) / (1 - e)), 0)`.
pub fn standard_initial_state(eccentricity: f64) -> OrbitalState {
    let e = eccentricity;
    OrbitalState::new(Vec3::new(1.0 - e, 0.0, 0.0), Vec3::new(0.0, ((1.0 + e) / (1.0 - e)).sqrt(), 0.0))
}

fn invariants<P: RadialPotential>(pot: &P, s: &OrbitalState) -> Result<(f64, Vec3), DomainError> {
    let r = s.radius()?;
    let e = 0.5 * s.v.norm_squared() + pot.u(r);
    if !e.is_finite() {
        return Err(DomainError::NonFinite);
    }
    Ok((e, s.angular_momentum()))
}

/// `(v, -U'(|x|) x / |x|)`.
pub fn pk_field<P: RadialPotential>(params: &PerturbedKeplerParams<P>, s: &OrbitalState) -> Result<OrbitalState, DomainError> {
    let r = s.radius()?;
    Ok(OrbitalState::new(s.v, s.x * (-params.potential.u_prime(r) / r)))
}

/// `(E, L)`.
pub fn pk_invariants<P: RadialPotential>(params: &PerturbedKeplerParams<P>, s: &OrbitalState) -> Result<(f64, Vec3), DomainError> {
    invariants(&params.potential, s)
}

/// `k1/2 |E - E0|^2 + k2/2 |L - L0|^2`.
pub fn pk_lyapunov<P: RadialPotential>(params: &PerturbedKeplerParams<P>, s: &OrbitalState) -> Result<f64, DomainError> {
    let (e, l) = pk_invariants(params, s)?;
    Ok(0.5 * params.gains.k1 * (e - params.e0).powi(2) + 0.5 * params.gains.k2 * (l - params.l0).norm_squared())
}

pub fn pk_lyapunov_gradient<P: RadialPotential>(params: &PerturbedKeplerParams<P>, s: &OrbitalState) -> Result<OrbitalState, DomainError> {
    let r = s.radius()?;
    let (e, l) = pk_invariants(params, s)?;
    let (k1, k2) = (params.gains.k1, params.gains.k2);
    let de = e - params.e0;
    let dl = l - params.l0;
    let up = params.potential.u_prime(r);
    Ok(OrbitalState::new(
        s.x * (k1 * de * up / r) + s.v.cross(dl) * k2,
        s.v * (k1 * de) + dl.cross(s.x) * k2,
    ))
}

pub fn pk_modified_field<P: RadialPotential>(params: &PerturbedKeplerParams<P>, s: &OrbitalState) -> Result<OrbitalState, DomainError> {
    let f = pk_field(params, s)?;
    let g = pk_lyapunov_gradient(params, s)?;
    Ok(OrbitalState::new(f.x - g.x, f.v - g.v))
}

/// Energy residuals at or below this count as a common solution.
pub const HYPOTHESIS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypothesisStatus {
    Satisfied,
    Violated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircularRoot {
    pub radius: f64,
    /// `|E0 - (r U'(r) / 2 + U(r))|` at the root.
    pub energy_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub status: HypothesisStatus,
    pub bracket: (f64, f64),
    pub roots: Vec<CircularRoot>,
}

/// Default radius bracket for [`pk_check_hypothesis`].
pub const DEFAULT_BRACKET: (f64, f64) = (1e-3, 1e3);

/// Checks that no circular orbit shares the reference `(E0, |L0|)`: finds
/// every root of `r^3 U'(r) = |L0|^2` on a log-spaced grid over
/// `[r_min, r_max]`, refines each by bisection, and tests whether
/// `E0 = r U'(r) / 2 + U(r)` also holds there.
pub fn pk_check_hypothesis<P: RadialPotential>(
    params: &PerturbedKeplerParams<P>,
    r_min: f64,
    r_max: f64,
    n_grid: usize,
) -> Result<HypothesisReport, ParamError> {
    if !(r_min > 0.0 && r_max > r_min && r_max.is_finite()) {
        return Err(ParamError::new("bracket", format!("need 0 < r_min < r_max, got [{r_min}, {r_max}]")));
    }
    if n_grid < 2 {
        return Err(ParamError::new("n_grid", "need at least two grid points"));
    }
    let pot = &params.potential;
    let l2 = params.l0.norm_squared();
    let g = |r: f64| -> Result<f64, ParamError> {
        let v = r * r * r * pot.u_prime(r) - l2;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ParamError::new("potential", format!("non-finite derivative at r = {r}")))
        }
    };
    let ratio = (r_max / r_min).ln() / (n_grid - 1) as f64;
    let grid: Vec<f64> = (0..n_grid)
        .map(|i| if i == n_grid - 1 { r_max } else { r_min * (ratio * i as f64).exp() })
        .collect();

    let mut radii = Vec::new();
    let mut g_prev = g(grid[0])?;
    if g_prev == 0.0 {
        radii.push(grid[0]);
    }
    for w in grid.windows(2) {
        let g_next = g(w[1])?;
        if g_next == 0.0 {
            radii.push(w[1]);
        } else if g_prev != 0.0 && (g_prev < 0.0) != (g_next < 0.0) {
            radii.push(bisect(&g, w[0], w[1], g_prev)?);
        }
        g_prev = g_next;
    }

    let roots: Vec<CircularRoot> = radii
        .into_iter()
        .map(|r| {
            let residual = (params.e0 - (0.5 * r * pot.u_prime(r) + pot.u(r))).abs();
            if residual.is_finite() {
                Ok(CircularRoot { radius: r, energy_residual: residual })
            } else {
                Err(ParamError::new("potential", format!("non-finite potential at r = {r}")))
            }
        })
        .collect::<Result<_, _>>()?;
    let status = if roots.iter().all(|c| c.energy_residual > HYPOTHESIS_TOLERANCE) {
        HypothesisStatus::Satisfied
    } else {
        HypothesisStatus::Violated
    };
    Ok(HypothesisReport {
        status,
        bracket: (r_min, r_max),
        roots,
    })
}

fn bisect(g: &impl Fn(f64) -> Result<f64, ParamError>, mut lo: f64, mut hi: f64, mut g_lo: f64) -> Result<f64, ParamError> {
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = g(mid)?;
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if (g_mid < 0.0) == (g_lo < 0.0) {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactnessReport {
    /// Time between the first two perihelion passages after the start.
    pub radial_period: f64,
    pub max_radius: f64,
    pub max_speed: f64,
    pub bounded: bool,
}

/// Integrates the unmodified dynamics with RK4 over one radial period and
/// records how far the orbit reaches. `bounded` requires the radial velocity
/// to change sign twice within `max_steps` and the radius to stay below `r_limit`.
pub fn pk_check_compactness<P: RadialPotential>(
    params: &PerturbedKeplerParams<P>,
    s0: &OrbitalState,
    h: f64,
    max_steps: usize,
    r_limit: f64,
) -> Result<CompactnessReport, StepError> {
    let field = |x: &[f64; STATE_DIM]| -> Result<[f64; STATE_DIM], DomainError> {
        Ok(pk_field(params, &OrbitalState::from_array(x))?.to_array())
    };
    let mut x = s0.to_array();
    let radial = |x: &[f64; STATE_DIM]| x[0] * x[3] + x[1] * x[4] + x[2] * x[5];
    let mut prev = radial(&x);
    let mut sign_changes = 0;
    let mut max_radius = s0.x.norm();
    let mut max_speed = s0.v.norm();
    let mut t = 0.0;
    for k in 1..=max_steps {
        x = rk4_step(&field, &x, h)?;
        t = k as f64 * h;
        let s = OrbitalState::from_array(&x);
        max_radius = max_radius.max(s.x.norm());
        max_speed = max_speed.max(s.v.norm());
        let rv = radial(&x);
        if (rv < 0.0) != (prev < 0.0) && prev != 0.0 {
            sign_changes += 1;
            if sign_changes == 2 {
                break;
            }
        }
        prev = rv;
    }
    Ok(CompactnessReport {
        radial_period: t,
        max_radius,
        max_speed,
        bounded: sign_changes == 2 && max_radius < r_limit && max_speed.is_finite(),
    })
}

impl<P: RadialPotential> FeedbackSystem<STATE_DIM> for PerturbedKeplerParams<P> {
    fn field(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        Ok(pk_field(self, &OrbitalState::from_array(x))?.to_array())
    }

    fn lyapunov(&self, x: &[f64; STATE_DIM]) -> Result<f64, DomainError> {
        pk_lyapunov(self, &OrbitalState::from_array(x))
    }

    fn lyapunov_gradient(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        Ok(pk_lyapunov_gradient(self, &OrbitalState::from_array(x))?.to_array())
    }

    fn modified_field(&self, x: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], DomainError> {
        Ok(pk_modified_field(self, &OrbitalState::from_array(x))?.to_array())
    }
}

/// `(E, L)`: four values.
#[derive(Debug, Clone, Copy)]
pub struct PerturbedKeplerIntegrals<P> {
    pub potential: P,
}

impl<P: RadialPotential> FirstIntegralMap for PerturbedKeplerIntegrals<P> {
    fn dim_state(&self) -> usize {
        STATE_DIM
    }

    fn dim_values(&self) -> usize {
        4
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
        let (e, l) = invariants(&self.potential, &OrbitalState::from_slice(x)?)?;
        Ok(vec![e, l.x, l.y, l.z])
    }

    /// `Df^T = [[U'(r) x / r, hat(v)], [v, -hat(x)]]` applied to `(a, w)`.
    fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
        ensure_len(w, 4)?;
        let s = OrbitalState::from_slice(x)?;
        let r = s.radius()?;
        let (a, wl) = (w[0], Vec3::from_slice(&w[1..]));
        let top = s.x * (a * self.potential.u_prime(r) / r) + hat(s.v) * wl;
        let bottom = s.v * a - hat(s.x) * wl;
        Ok(OrbitalState::new(top, bottom).to_array().to_vec())
    }
}
