//! Lyapunov feedback construction.
//!
//! Given first integrals `f` stacked into one vector and a reference value
//! `f(x0)`, the function `V(x) = 1/2 (f(x) - f(x0))^T K (f(x) - f(x0))` with a
//! diagonal positive `K` vanishes exactly on the invariant set through `x0`.
//! Integrating `X - grad V` instead of `X` makes that set attracting while
//! leaving the dynamics on it unchanged.
//!
//! Each shipped system supplies closed-form gradients for the hot loop.
//! [`generic_gradient`] assembles `Df^T K (f(x) - f(x0))` from a
//! [`FirstIntegralMap`] and serves as the cross-check for those formulas.

use crate::error::{ensure_len, DomainError, ParamError};
use crate::numerics;

/// Stacked first integrals `f: R^n -> R^m` together with the action of `Df(x)^T`.
pub trait FirstIntegralMap {
    fn dim_state(&self) -> usize;
    fn dim_values(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError>;
    /// Returns `Df(x)^T w`; linear in `w`.
    fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError>;

    /// Dense `m x n` Jacobian, assembled row by row from `Df^T e_i`.
    fn jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, DomainError> {
        let m = self.dim_values();
        let mut rows = Vec::with_capacity(m);
        let mut e = vec![0.0; m];
        for i in 0..m {
            e[i] = 1.0;
            rows.push(self.jacobian_transpose_apply(x, &e)?);
            e[i] = 0.0;
        }
        Ok(rows)
    }
}

/// Reference values `f(x0)` and the diagonal of the gain matrix `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSpec {
    reference: Vec<f64>,
    gain_diag: Vec<f64>,
}

impl FeedbackSpec {
    pub fn new(reference: Vec<f64>, gain_diag: Vec<f64>) -> Result<Self, ParamError> {
        if reference.len() != gain_diag.len() {
            return Err(ParamError::new(
                "gain_diag",
                format!(
                    "length {} does not match reference length {}",
                    gain_diag.len(),
                    reference.len()
                ),
            ));
        }
        if let Some(g) = gain_diag.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(ParamError::new("gain_diag", format!("gain {g} is not positive")));
        }
        if reference.iter().any(|r| !r.is_finite()) {
            return Err(ParamError::new("reference", "non-finite reference value"));
        }
        Ok(Self {
            reference,
            gain_diag,
        })
    }

    /// Builds the block-constant diagonal: `gains[i]` repeated `block_sizes[i]` times.
    pub fn from_blocks(
        reference: Vec<f64>,
        blocks: &[(usize, f64)],
    ) -> Result<Self, ParamError> {
        let gain_diag = blocks
            .iter()
            .flat_map(|&(n, k)| std::iter::repeat(k).take(n))
            .collect();
        Self::new(reference, gain_diag)
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn gain_diag(&self) -> &[f64] {
        &self.gain_diag
    }

    /// Same reference, every gain multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self, ParamError> {
        Self::new(
            self.reference.clone(),
            self.gain_diag.iter().map(|g| g * s).collect(),
        )
    }

    fn weighted_residual<F: FirstIntegralMap + ?Sized>(
        &self,
        f: &F,
        x: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), DomainError> {
        ensure_len(x, f.dim_state())?;
        let values = f.eval(x)?;
        ensure_len(&values, self.reference.len())?;
        let delta: Vec<f64> = values
            .iter()
            .zip(&self.reference)
            .map(|(v, r)| v - r)
            .collect();
        let weighted = delta
            .iter()
            .zip(&self.gain_diag)
            .map(|(d, k)| d * k)
            .collect();
        Ok((delta, weighted))
    }
}

/// `Df(x)^T K (f(x) - f(x0))`.
pub fn generic_gradient<F: FirstIntegralMap + ?Sized>(
    f: &F,
    spec: &FeedbackSpec,
    x: &[f64],
) -> Result<Vec<f64>, DomainError> {
    let (delta, weighted) = spec.weighted_residual(f, x)?;
    if delta.iter().all(|d| *d == 0.0) {
        return Ok(vec![0.0; f.dim_state()]);
    }
    f.jacobian_transpose_apply(x, &weighted)
}

/// `1/2 (f(x) - f(x0))^T K (f(x) - f(x0))`.
pub fn lyapunov_value<F: FirstIntegralMap + ?Sized>(
    f: &F,
    spec: &FeedbackSpec,
    x: &[f64],
) -> Result<f64, DomainError> {
    let (delta, weighted) = spec.weighted_residual(f, x)?;
    Ok(0.5 * numerics::dot(&delta, &weighted))
}

type MatrixGain<const N: usize> = Box<dyn Fn(&[f64; N], &[f64; N]) -> [f64; N] + Send + Sync>;

/// The modified field `X(x) - A(x) grad V(x)`, with `A = I` unless a matrix gain is set.
pub struct FeedbackField<const N: usize, B, G> {
    base: B,
    gradient: G,
    matrix_gain: Option<MatrixGain<N>>,
}

/// Combines a base field and a Lyapunov gradient into `X - grad V`.
pub fn make_feedback_field<const N: usize, B, G>(base: B, gradient: G) -> FeedbackField<N, B, G>
where
    B: Fn(&[f64; N]) -> Result<[f64; N], DomainError>,
    G: Fn(&[f64; N]) -> Result<[f64; N], DomainError>,
{
    FeedbackField {
        base,
        gradient,
        matrix_gain: None,
    }
}

impl<const N: usize, B, G> FeedbackField<N, B, G>
where
    B: Fn(&[f64; N]) -> Result<[f64; N], DomainError>,
    G: Fn(&[f64; N]) -> Result<[f64; N], DomainError>,
{
    /// Installs `A(x)`, given as its action `(x, w) -> A(x) w`. The symmetric
    /// part of `A(x)` must be positive definite for the set to stay attracting.
    pub fn with_matrix_gain<A>(mut self, gain: A) -> Self
    where
        A: Fn(&[f64; N], &[f64; N]) -> [f64; N] + Send + Sync + 'static,
    {
        self.matrix_gain = Some(Box::new(gain));
        self
    }

    pub fn eval(&self, x: &[f64; N]) -> Result<[f64; N], DomainError> {
        let mut out = (self.base)(x)?;
        let mut g = (self.gradient)(x)?;
        if let Some(a) = &self.matrix_gain {
            g = a(x, &g);
        }
        for (o, gi) in out.iter_mut().zip(g) {
            *o -= gi;
        }
        Ok(out)
    }
}

/// A vector field on `R^N` equipped with a Lyapunov function for its invariant set.
///
/// Implementors guarantee `<grad V(x), X(x)> = 0` everywhere on their domain.
pub trait FeedbackSystem<const N: usize> {
    fn field(&self, x: &[f64; N]) -> Result<[f64; N], DomainError>;
    fn lyapunov(&self, x: &[f64; N]) -> Result<f64, DomainError>;
    fn lyapunov_gradient(&self, x: &[f64; N]) -> Result<[f64; N], DomainError>;

    fn modified_field(&self, x: &[f64; N]) -> Result<[f64; N], DomainError> {
        let mut out = self.field(x)?;
        let g = self.lyapunov_gradient(x)?;
        for (o, gi) in out.iter_mut().zip(g) {
            *o -= gi;
        }
        Ok(out)
    }

    /// Upper bound on sublevel values `c` for which attraction is guaranteed, if known.
    fn gain_bound(&self) -> Option<f64> {
        None
    }
}

/// Central finite difference of a scalar function; test and diagnostic use only.
pub fn finite_difference_gradient<const N: usize>(
    v: impl Fn(&[f64; N]) -> Result<f64, DomainError>,
    x: &[f64; N],
    step: f64,
) -> Result<[f64; N], DomainError> {
    let mut g = [0.0; N];
    for i in 0..N {
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += step;
        xm[i] -= step;
        g[i] = (v(&xp)? - v(&xm)?) / (2.0 * step);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = (x0 * x1, x0 + x2^2) on R^3.
    struct Toy;

    impl FirstIntegralMap for Toy {
        fn dim_state(&self) -> usize {
            3
        }
        fn dim_values(&self) -> usize {
            2
        }
        fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
            Ok(vec![x[0] * x[1], x[0] + x[2] * x[2]])
        }
        fn jacobian_transpose_apply(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>, DomainError> {
            Ok(vec![x[1] * w[0] + w[1], x[0] * w[0], 2.0 * x[2] * w[1]])
        }
    }

    fn spec() -> FeedbackSpec {
        FeedbackSpec::new(vec![1.0, 2.0], vec![3.0, 5.0]).unwrap()
    }

    #[test]
    fn rejects_nonpositive_gain() {
        assert!(FeedbackSpec::new(vec![0.0], vec![0.0]).is_err());
        assert!(FeedbackSpec::new(vec![0.0], vec![-1.0]).is_err());
        assert!(FeedbackSpec::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn block_gains_repeat() {
        let s = FeedbackSpec::from_blocks(vec![0.0; 4], &[(3, 2.0), (1, 7.0)]).unwrap();
        assert_eq!(s.gain_diag(), &[2.0, 2.0, 2.0, 7.0]);
    }

    #[test]
    fn gradient_vanishes_on_reference() {
        // x = (1, 1, 1) gives f = (1, 2)
        let g = generic_gradient(&Toy, &spec(), &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert_eq!(lyapunov_value(&Toy, &spec(), &[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = [0.3, -1.2, 0.8];
        let g = generic_gradient(&Toy, &spec(), &x).unwrap();
        let fd = finite_difference_gradient(|y| lyapunov_value(&Toy, &spec(), y), &x, 1e-6).unwrap();
        for i in 0..3 {
            assert!((g[i] - fd[i]).abs() < 1e-7 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn gradient_linear_in_gains() {
        let x = [0.3, -1.2, 0.8];
        let g1 = generic_gradient(&Toy, &spec(), &x).unwrap();
        let g2 = generic_gradient(&Toy, &spec().scaled(2.0).unwrap(), &x).unwrap();
        for i in 0..3 {
            assert_eq!(g2[i], 2.0 * g1[i]);
        }
    }

    #[test]
    fn dimension_mismatch_is_domain_error() {
        assert!(matches!(
            generic_gradient(&Toy, &spec(), &[1.0, 2.0]),
            Err(DomainError::Dimension { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn jacobian_rows() {
        let j = Toy.jacobian(&[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(j, vec![vec![3.0, 2.0, 0.0], vec![1.0, 0.0, 8.0]]);
    }

    #[test]
    fn feedback_field_subtracts_gradient() {
        let base = |x: &[f64; 2]| Ok([x[1], -x[0]]);
        let grad = |x: &[f64; 2]| Ok([0.5 * x[0], 0.5 * x[1]]);
        let field = make_feedback_field(base, grad);
        assert_eq!(field.eval(&[2.0, 4.0]).unwrap(), [4.0 - 1.0, -2.0 - 2.0]);

        let zero_grad = |_: &[f64; 2]| Ok([0.0, 0.0]);
        let field = make_feedback_field(base, zero_grad);
        assert_eq!(field.eval(&[2.0, 4.0]).unwrap(), base(&[2.0, 4.0]).unwrap());
    }

    #[test]
    fn identity_matrix_gain_is_plain_feedback() {
        let base = |x: &[f64; 2]| Ok([x[1], -x[0]]);
        let grad = |x: &[f64; 2]| Ok([0.5 * x[0] * x[1], 0.25 * x[1]]);
        let plain = make_feedback_field(base, grad);
        let gained = make_feedback_field(base, grad).with_matrix_gain(|_, w| *w);
        for x in [[1.0, 2.0], [-0.5, 3.0], [0.0, 0.0], [7.0, -1.0]] {
            assert_eq!(plain.eval(&x).unwrap(), gained.eval(&x).unwrap());
        }
        let doubled = make_feedback_field(base, grad).with_matrix_gain(|_, w| [2.0 * w[0], 2.0 * w[1]]);
        assert_eq!(doubled.eval(&[1.0, 2.0]).unwrap(), [2.0 - 2.0, -1.0 - 1.0]);
    }
}
