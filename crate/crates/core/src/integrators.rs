//! One-step schemes: forward Euler, classical RK4, the two Störmer-Verlet
//! orderings, and the standard projection method around any base scheme.

use thiserror::Error;

use crate::error::DomainError;
use crate::feedback::FirstIntegralMap;
use crate::numerics;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("vector field returned a non-finite value")]
    NonFinite,
    #[error("step size {0} is not a positive finite number")]
    InvalidStepSize(f64),
    #[error("projection did not converge in {iterations} iterations (residual {residual:e})")]
    ProjectionDiverged { iterations: usize, residual: f64 },
    #[error("constraint Gram matrix is singular (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },
}

/// A failed step, tagged with the zero-based index of the step that failed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("step {step}: {source}")]
pub struct IntegrationError {
    pub step: usize,
    #[source]
    pub source: StepError,
}

pub type Field<'a, const N: usize> = dyn Fn(&[f64; N]) -> Result<[f64; N], DomainError> + 'a;

/// A one-step map `(field, x, h) -> x_next`.
pub trait SchemeStep<const N: usize> {
    fn advance(&self, field: &Field<'_, N>, x: &[f64; N], h: f64) -> Result<[f64; N], StepError>;
}

fn check_h(h: f64) -> Result<(), StepError> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(StepError::InvalidStepSize(h))
    }
}

fn eval<const N: usize>(field: &Field<'_, N>, x: &[f64; N]) -> Result<[f64; N], StepError> {
    let k = field(x)?;
    if k.iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(StepError::NonFinite)
    }
}

fn axpy<const N: usize>(x: &[f64; N], a: f64, k: &[f64; N]) -> [f64; N] {
    let mut out = *x;
    for (o, ki) in out.iter_mut().zip(k) {
        *o += a * ki;
    }
    out
}

/// `x + h * field(x)`.
pub fn euler_step<const N: usize>(
    field: &Field<'_, N>,
    x: &[f64; N],
    h: f64,
) -> Result<[f64; N], StepError> {
    check_h(h)?;
    Ok(axpy(x, h, &eval(field, x)?))
}

/// Classical four-stage Runge-Kutta.
pub fn rk4_step<const N: usize>(
    field: &Field<'_, N>,
    x: &[f64; N],
    h: f64,
) -> Result<[f64; N], StepError> {
    check_h(h)?;
    let k1 = eval(field, x)?;
    let k2 = eval(field, &axpy(x, 0.5 * h, &k1))?;
    let k3 = eval(field, &axpy(x, 0.5 * h, &k2))?;
    let k4 = eval(field, &axpy(x, h, &k3))?;
    let mut out = *x;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Euler;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rk4;

impl<const N: usize> SchemeStep<N> for Euler {
    fn advance(&self, field: &Field<'_, N>, x: &[f64; N], h: f64) -> Result<[f64; N], StepError> {
        euler_step(field, x, h)
    }
}

impl<const N: usize> SchemeStep<N> for Rk4 {
    fn advance(&self, field: &Field<'_, N>, x: &[f64; N], h: f64) -> Result<[f64; N], StepError> {
        rk4_step(field, x, h)
    }
}

/// Which Störmer-Verlet ordering to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerletVariant {
    /// Half kick, drift, half kick.
    A,
    /// Half drift, kick, half drift (the adjoint ordering).
    B,
}

/// One Störmer-Verlet step for `q'' = accel(q)`.
pub fn stormer_verlet_step<const D: usize, A>(
    accel: A,
    q: &[f64; D],
    v: &[f64; D],
    h: f64,
    variant: VerletVariant,
) -> Result<([f64; D], [f64; D]), StepError>
where
    A: Fn(&[f64; D]) -> Result<[f64; D], DomainError>,
{
    check_h(h)?;
    let acc = |q: &[f64; D]| -> Result<[f64; D], StepError> {
        let a = accel(q)?;
        if a.iter().all(|x| x.is_finite()) {
            Ok(a)
        } else {
            Err(StepError::NonFinite)
        }
    };
    match variant {
        VerletVariant::A => {
            let v_half = axpy(v, 0.5 * h, &acc(q)?);
            let q_next = axpy(q, h, &v_half);
            let v_next = axpy(&v_half, 0.5 * h, &acc(&q_next)?);
            Ok((q_next, v_next))
        }
        VerletVariant::B => {
            let q_half = axpy(q, 0.5 * h, v);
            let v_next = axpy(v, h, &acc(&q_half)?);
            let q_next = axpy(&q_half, 0.5 * h, &v_next);
            Ok((q_next, v_next))
        }
    }
}

/// Constraint data for the projection method.
pub struct ProjectionConfig<C> {
    pub constraint: C,
    pub target: Vec<f64>,
    /// Bound on the Euclidean norm of `f(x) - target`.
    pub tol: f64,
    pub max_iter: usize,
}

/// Gram matrices with a condition estimate above this are treated as singular.
pub const MAX_GRAM_CONDITION: f64 = 1e14;

/// Base step followed by projection onto `{ f = target }` along the range of `Df^T`.
pub struct Projection<S, C> {
    pub base: S,
    pub config: ProjectionConfig<C>,
}

impl<const N: usize, S: SchemeStep<N>, C: FirstIntegralMap> SchemeStep<N> for Projection<S, C> {
    fn advance(&self, field: &Field<'_, N>, x: &[f64; N], h: f64) -> Result<[f64; N], StepError> {
        projection_step(&self.base, &self.config, field, x, h)
    }
}

/// Takes a base step to `x~`, then solves `f(x~ + Df(x~)^T lambda) = target`
/// by simplified Newton iteration with the fixed Gram matrix `Df Df^T`.
pub fn projection_step<const N: usize, S, C>(
    base: &S,
    cfg: &ProjectionConfig<C>,
    field: &Field<'_, N>,
    x: &[f64; N],
    h: f64,
) -> Result<[f64; N], StepError>
where
    S: SchemeStep<N> + ?Sized,
    C: FirstIntegralMap,
{
    let predicted = base.advance(field, x, h)?;
    project(cfg, &predicted)
}

/// Projects `x` onto the constraint level set; returns `x` untouched if it already satisfies it.
pub fn project<const N: usize, C: FirstIntegralMap>(
    cfg: &ProjectionConfig<C>,
    x: &[f64; N],
) -> Result<[f64; N], StepError> {
    let residual = |y: &[f64; N]| -> Result<Vec<f64>, StepError> {
        let v = cfg.constraint.eval(y)?;
        Ok(v.iter().zip(&cfg.target).map(|(a, b)| a - b).collect())
    };
    let mut r = residual(x)?;
    if numerics::norm(&r) <= cfg.tol {
        return Ok(*x);
    }
    let jac = cfg.constraint.jacobian(x)?;
    let m = jac.len();
    let mut gram = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let g = numerics::dot(&jac[i], &jac[j]);
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let chol = Cholesky::factor(&gram)?;
    let mut lambda = vec![0.0; m];
    for iter in 1..=cfg.max_iter {
        let delta = chol.solve(&r);
        for (l, d) in lambda.iter_mut().zip(&delta) {
            *l -= d;
        }
        let mut y = *x;
        for (row, l) in jac.iter().zip(&lambda) {
            for (yi, ji) in y.iter_mut().zip(row) {
                *yi += l * ji;
            }
        }
        r = residual(&y)?;
        let rn = numerics::norm(&r);
        if !rn.is_finite() {
            return Err(StepError::NonFinite);
        }
        if rn <= cfg.tol {
            return Ok(y);
        }
        if iter == cfg.max_iter {
            return Err(StepError::ProjectionDiverged {
                iterations: iter,
                residual: rn,
            });
        }
    }
    Err(StepError::ProjectionDiverged {
        iterations: cfg.max_iter,
        residual: numerics::norm(&r),
    })
}

/// Lower-triangular factor of a small symmetric positive definite matrix.
struct Cholesky {
    l: Vec<Vec<f64>>,
}

impl Cholesky {
    fn factor(a: &[Vec<f64>]) -> Result<Self, StepError> {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut d = a[j][j];
            for k in 0..j {
                d -= l[j][k] * l[j][k];
            }
            if !(d > 0.0) {
                return Err(StepError::RankDeficient {
                    condition: f64::INFINITY,
                });
            }
            let djj = d.sqrt();
            l[j][j] = djj;
            for i in j + 1..n {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = s / djj;
            }
        }
        let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
            (lo.min(l[i][i]), hi.max(l[i][i]))
        });
        let condition = (hi / lo).powi(2);
        if condition > MAX_GRAM_CONDITION {
            return Err(StepError::RankDeficient { condition });
        }
        Ok(Self { l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let l = &self.l;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
            y[i] = (b[i] - s) / l[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
            x[i] = (y[i] - s) / l[i][i];
        }
        x
    }
}

/// Advances `x0` through `steps` calls of `step`, handing every state (including
/// the initial one) to `observe` together with its step index.
pub fn integrate<const N: usize, S, O>(
    x0: [f64; N],
    steps: usize,
    mut step: S,
    mut observe: O,
) -> Result<[f64; N], IntegrationError>
where
    S: FnMut(&[f64; N]) -> Result<[f64; N], StepError>,
    O: FnMut(usize, &[f64; N]),
{
    let mut x = x0;
    observe(0, &x);
    for k in 0..steps {
        x = step(&x).map_err(|source| IntegrationError { step: k, source })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError {
                step: k,
                source: StepError::NonFinite,
            });
        }
        observe(k + 1, &x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn growth(x: &[f64; 1]) -> Result<[f64; 1], DomainError> {
        Ok([x[0]])
    }

    #[test]
    fn euler_examples() {
        let zero = |_: &[f64; 2]| Ok([0.0, 0.0]);
        assert_eq!(euler_step(&zero, &[1.0, 2.0], 0.1).unwrap(), [1.0, 2.0]);
        let constant = |_: &[f64; 2]| Ok([2.0, -4.0]);
        assert_eq!(euler_step(&constant, &[1.0, 2.0], 0.5).unwrap(), [2.0, 0.0]);
        assert!((euler_step(&growth, &[1.0], 0.1).unwrap()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn rk4_examples() {
        let zero = |_: &[f64; 2]| Ok([0.0, 0.0]);
        assert_eq!(rk4_step(&zero, &[1.0, 2.0], 0.1).unwrap(), [1.0, 2.0]);
        // 1 + h + h^2/2 + h^3/6 + h^4/24 at h = 0.1
        let series = 1.0 + 0.1 + 0.005 + 0.1f64.powi(3) / 6.0 + 0.1f64.powi(4) / 24.0;
        assert!((rk4_step(&growth, &[1.0], 0.1).unwrap()[0] - series).abs() < 1e-15);
        // state (t, y) with t' = 1, y' = t: y(1) = 1/2 exactly
        let ramp = |x: &[f64; 2]| Ok([1.0, x[0]]);
        assert_eq!(rk4_step(&ramp, &[0.0, 0.0], 1.0).unwrap(), [1.0, 0.5]);
    }

    #[test]
    fn rk4_exact_for_quartic_quadrature() {
        // y' = t^3 from t = 0: y(h) = h^4 / 4; Simpson's rule is exact for cubics
        let cubic = |x: &[f64; 2]| Ok([1.0, x[0].powi(3)]);
        let out = rk4_step(&cubic, &[0.0, 0.0], 2.0).unwrap();
        assert!((out[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn nonfinite_field_is_rejected() {
        let bad = |_: &[f64; 1]| Ok([f64::NAN]);
        assert_eq!(euler_step(&bad, &[1.0], 0.1), Err(StepError::NonFinite));
        assert_eq!(rk4_step(&bad, &[1.0], 0.1), Err(StepError::NonFinite));
        let err = integrate([1.0], 5, |x| euler_step(&bad, x, 0.1), |_, _| {}).unwrap_err();
        assert_eq!(err.step, 0);
    }

    #[test]
    fn integration_error_carries_step_index() {
        let blowup = |x: &[f64; 1]| {
            if x[0] > 1.25 {
                Ok([f64::INFINITY])
            } else {
                Ok([1.0])
            }
        };
        let err = integrate([1.0], 10, |x| euler_step(&blowup, x, 0.1), |_, _| {}).unwrap_err();
        assert_eq!(err.step, 3);
        assert_eq!(err.source, StepError::NonFinite);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        assert_eq!(
            euler_step(&growth, &[1.0], 0.0),
            Err(StepError::InvalidStepSize(0.0))
        );
        assert!(rk4_step(&growth, &[1.0], -0.1).is_err());
    }

    #[test]
    fn verlet_free_drift() {
        let free = |_: &[f64; 2]| Ok([0.0, 0.0]);
        for variant in [VerletVariant::A, VerletVariant::B] {
            let (q, v) = stormer_verlet_step(free, &[1.0, 2.0], &[0.5, -1.0], 0.2, variant).unwrap();
            assert!((q[0] - 1.1).abs() < 1e-15 && (q[1] - 1.8).abs() < 1e-15);
            assert_eq!(v, [0.5, -1.0]);
        }
    }

    #[test]
    fn verlet_harmonic_energy_bounded() {
        let spring = |q: &[f64; 1]| Ok([-q[0]]);
        let h = 0.05;
        for variant in [VerletVariant::A, VerletVariant::B] {
            let (mut q, mut v) = ([1.0], [0.0]);
            let mut max_err: f64 = 0.0;
            for _ in 0..1_000_000 {
                (q, v) = stormer_verlet_step(spring, &q, &v, h, variant).unwrap();
                let e = 0.5 * (q[0] * q[0] + v[0] * v[0]);
                max_err = max_err.max((e - 0.5).abs());
            }
            // O(h^2) oscillation, no secular growth
            assert!(max_err < h * h, "{variant:?}: {max_err}");
        }
        // forward Euler multiplies the energy by (1 + h^2) every step
        let osc = |x: &[f64; 2]| Ok([x[1], -x[0]]);
        let mut x = [1.0, 0.0];
        for _ in 0..1000 {
            x = euler_step(&osc, &x, h).unwrap();
        }
        let e = 0.5 * (x[0] * x[0] + x[1] * x[1]);
        assert!((e / 0.5 - (1.0 + h * h).powi(1000)).abs() < 1e-9);
    }

    /// Constraint |x|^2 = 1 on R^2.
    struct Circle;

    impl FirstIntegralMap for Circle {
        fn dim_state(&self) -> usize {
            2
        }
        fn dim_values(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
            Ok(vec![x[0] * x[0] + x[1] * x[1]])
        }
        fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
            Ok(vec![2.0 * x[0] * w[0], 2.0 * x[1] * w[0]])
        }
    }

    fn circle_cfg(tol: f64) -> ProjectionConfig<Circle> {
        ProjectionConfig {
            constraint: Circle,
            target: vec![1.0],
            tol,
            max_iter: 50,
        }
    }

    #[test]
    fn projection_is_identity_on_constraint() {
        let zero = |_: &[f64; 2]| Ok([0.0, 0.0]);
        let x = [0.6, 0.8];
        let out = projection_step(&Euler, &circle_cfg(1e-14), &zero, &x, 0.1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn projection_reaches_tolerance() {
        let rot = |x: &[f64; 2]| Ok([-x[1], x[0]]);
        let cfg = circle_cfg(1e-12);
        let mut x = [1.0, 0.0];
        for _ in 0..1000 {
            x = projection_step(&Euler, &cfg, &rot, &x, 0.05).unwrap();
            assert!((x[0] * x[0] + x[1] * x[1] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_reports_divergence() {
        let rot = |x: &[f64; 2]| Ok([-x[1], x[0]]);
        let cfg = ProjectionConfig {
            max_iter: 1,
            ..circle_cfg(1e-15)
        };
        let err = projection_step(&Euler, &cfg, &rot, &[1.0, 0.0], 0.5).unwrap_err();
        assert!(matches!(err, StepError::ProjectionDiverged { iterations: 1, .. }));
    }

    #[test]
    fn projection_reports_rank_deficiency() {
        // the constraint gradient vanishes at the origin
        let cfg = circle_cfg(1e-10);
        let zero = |_: &[f64; 2]| Ok([0.0, 0.0]);
        let err = projection_step(&Euler, &cfg, &zero, &[0.0, 0.0], 0.1).unwrap_err();
        assert!(matches!(err, StepError::RankDeficient { .. }));
    }

    #[test]
    fn schemes_are_deterministic() {
        let f = |x: &[f64; 3]| Ok([x[1].sin(), x[2] * x[0], -x[0].exp()]);
        let x = [0.3, -0.7, 1.1];
        assert_eq!(rk4_step(&f, &x, 0.01).unwrap(), rk4_step(&f, &x, 0.01).unwrap());
        assert_eq!(euler_step(&f, &x, 0.01).unwrap(), euler_step(&f, &x, 0.01).unwrap());
    }
}
