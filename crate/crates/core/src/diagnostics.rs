//! Conservation-drift metrics, hypothesis validators and the step-size
//! attractor study.

use thiserror::Error;

use crate::error::{DomainError, ParamError};
use crate::feedback::{finite_difference_gradient, generic_gradient, FeedbackSpec, FeedbackSystem, FirstIntegralMap};
use crate::integrators::{euler_step, rk4_step, StepError};
use crate::kepler::{self, KeplerParams, OrbitalState};
use crate::numerics;
use crate::perturbed_kepler::{self, PerturbedKeplerParams, RadialPotential};
use crate::rigid_body::{self, RigidBodyParams, RigidBodyState};

/// Conservation metrics of a state measured against a reference state.
pub trait DriftMetrics<const N: usize> {
    fn metric_names(&self) -> &'static [&'static str];
    fn metrics(&self, reference: &[f64; N], x: &[f64; N]) -> Result<Vec<f64>, DomainError>;
}

impl DriftMetrics<{ rigid_body::STATE_DIM }> for RigidBodyParams {
    fn metric_names(&self) -> &'static [&'static str] {
        &["dE", "dpi", "orth"]
    }

    fn metrics(&self, reference: &[f64; 12], x: &[f64; 12]) -> Result<Vec<f64>, DomainError> {
        let s0 = RigidBodyState::from_array(reference);
        let s = RigidBodyState::from_array(x);
        s.validate()?;
        let (e0, pi0) = rigid_body::rb_integrals(self.inertia, &s0);
        let (e, pi) = rigid_body::rb_integrals(self.inertia, &s);
        Ok(vec![(e - e0).abs(), (pi - pi0).norm(), s.orthogonality_defect()])
    }
}

impl DriftMetrics<{ kepler::STATE_DIM }> for KeplerParams {
    fn metric_names(&self) -> &'static [&'static str] {
        &["dL", "dA", "dE"]
    }

    fn metrics(&self, reference: &[f64; 6], x: &[f64; 6]) -> Result<Vec<f64>, DomainError> {
        let a = kepler::kepler_invariants(self, &OrbitalState::from_array(reference))?;
        let b = kepler::kepler_invariants(self, &OrbitalState::from_array(x))?;
        Ok(vec![(b.l - a.l).norm(), (b.a - a.a).norm(), (b.energy - a.energy).abs()])
    }
}

impl<P: RadialPotential> DriftMetrics<{ kepler::STATE_DIM }> for PerturbedKeplerParams<P> {
    fn metric_names(&self) -> &'static [&'static str] {
        &["dE", "dL"]
    }

    fn metrics(&self, reference: &[f64; 6], x: &[f64; 6]) -> Result<Vec<f64>, DomainError> {
        let (e0, l0) = perturbed_kepler::pk_invariants(self, &OrbitalState::from_array(reference))?;
        let (e, l) = perturbed_kepler::pk_invariants(self, &OrbitalState::from_array(x))?;
        Ok(vec![(e - e0).abs(), (l - l0).norm()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSample {
    pub t: f64,
    /// Lyapunov function value.
    pub v: f64,
    /// Values in the order of [`DriftMetrics::metric_names`].
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("sample {index}: {source}")]
pub struct DriftError {
    pub index: usize,
    #[source]
    pub source: DomainError,
}

/// Streaming drift measurement: keeps running maxima at full resolution.
pub struct DriftTracker<'a, S, const N: usize> {
    system: &'a S,
    reference: [f64; N],
    max_metrics: Vec<f64>,
    max_v: f64,
    last_v: f64,
    count: usize,
}

impl<'a, const N: usize, S> DriftTracker<'a, S, N>
where
    S: FeedbackSystem<N> + DriftMetrics<N>,
{
    pub fn new(system: &'a S, reference: [f64; N]) -> Self {
        Self {
            system,
            reference,
            max_metrics: vec![0.0; system.metric_names().len()],
            max_v: 0.0,
            last_v: 0.0,
            count: 0,
        }
    }

    pub fn observe(&mut self, t: f64, x: &[f64; N]) -> Result<DriftSample, DriftError> {
        let index = self.count;
        let wrap = |source| DriftError { index, source };
        let metrics = self.system.metrics(&self.reference, x).map_err(wrap)?;
        let v = self.system.lyapunov(x).map_err(wrap)?;
        for (m, val) in self.max_metrics.iter_mut().zip(&metrics) {
            *m = m.max(*val);
        }
        self.max_v = self.max_v.max(v);
        self.last_v = v;
        self.count += 1;
        Ok(DriftSample { t, v, metrics })
    }

    pub fn max_metrics(&self) -> &[f64] {
        &self.max_metrics
    }

    pub fn max_v(&self) -> f64 {
        self.max_v
    }

    pub fn last_v(&self) -> f64 {
        self.last_v
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Drift of every trajectory sample relative to the first.
pub fn measure_drift<const N: usize, S>(system: &S, trajectory: &[(f64, [f64; N])]) -> Result<Vec<DriftSample>, DriftError>
where
    S: FeedbackSystem<N> + DriftMetrics<N>,
{
    let Some((_, first)) = trajectory.first() else {
        return Ok(Vec::new());
    };
    let mut tracker = DriftTracker::new(system, *first);
    trajectory.iter().map(|(t, x)| tracker.observe(*t, x)).collect()
}

/// Column-wise largest entry of each metric over a set of samples.
pub fn max_metrics(samples: &[DriftSample]) -> Vec<f64> {
    let n = samples.first().map_or(0, |s| s.metrics.len());
    (0..n)
        .map(|i| samples.iter().map(|s| s.metrics[i]).fold(0.0, f64::max))
        .collect()
}

/// Singular values of a small dense matrix given by rows, via one-sided
/// Jacobi rotations on the columns of its transpose. Returned descending.
pub fn singular_values(rows: &[Vec<f64>]) -> Vec<f64> {
    // columns of the working matrix are the rows of the input
    let mut cols: Vec<Vec<f64>> = rows.to_vec();
    let m = cols.len();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = numerics::dot(&cols[p], &cols[p]);
                let beta = numerics::dot(&cols[q], &cols[q]);
                let gamma = numerics::dot(&cols[p], &cols[q]);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (a, b) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (ap, aq) = (*a, *b);
                    *a = c * ap - s * aq;
                    *b = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| numerics::norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Smallest singular values below this count as rank loss.
pub const RANK_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    /// Smallest singular value of `Df` at each sample.
    pub per_sample_min: Vec<f64>,
    pub min_singular_value: f64,
    /// Fewest singular values above the threshold over all samples.
    pub min_numeric_rank: usize,
    pub required_rank: usize,
    pub passed: bool,
}

/// Checks that `Df` has full row rank at every sample.
pub fn check_rank_condition<F: FirstIntegralMap + ?Sized>(f: &F, samples: &[Vec<f64>]) -> Result<RankReport, DriftError> {
    let mut per_sample_min = Vec::with_capacity(samples.len());
    let mut min_rank = f.dim_values();
    for (index, x) in samples.iter().enumerate() {
        let jac = f.jacobian(x).map_err(|source| DriftError { index, source })?;
        let sv = singular_values(&jac);
        min_rank = min_rank.min(sv.iter().filter(|s| **s > RANK_THRESHOLD).count());
        per_sample_min.push(sv.last().copied().unwrap_or(0.0));
    }
    let min_singular_value = per_sample_min.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RankReport {
        passed: !samples.is_empty() && min_singular_value > RANK_THRESHOLD,
        per_sample_min,
        min_singular_value,
        min_numeric_rank: min_rank,
        required_rank: f.dim_values(),
    })
}

/// Largest `|<grad V, X>| / (1 + |grad V| |X|)` over the samples.
pub fn orthogonality_residual<const N: usize, S: FeedbackSystem<N>>(system: &S, samples: &[[f64; N]]) -> Result<f64, DriftError> {
    let mut worst: f64 = 0.0;
    for (index, x) in samples.iter().enumerate() {
        let wrap = |source| DriftError { index, source };
        let g = system.lyapunov_gradient(x).map_err(wrap)?;
        let f = system.field(x).map_err(wrap)?;
        let r = numerics::dot(&g, &f).abs() / (1.0 + numerics::norm(&g) * numerics::norm(&f));
        worst = worst.max(r);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    /// Largest `|analytic - generic| / |analytic|`.
    pub max_rel_generic: f64,
    /// Largest `|analytic - finite difference| / |analytic|`.
    pub max_rel_finite_difference: f64,
}

/// Compares a system's closed-form gradient with `Df^T K df` and with
/// central differences of `V` (step `1e-6`).
pub fn gradient_consistency<const N: usize, S, F>(system: &S, f: &F, spec: &FeedbackSpec, samples: &[[f64; N]]) -> Result<GradientReport, DriftError>
where
    S: FeedbackSystem<N>,
    F: FirstIntegralMap + ?Sized,
{
    let mut rep = GradientReport {
        max_rel_generic: 0.0,
        max_rel_finite_difference: 0.0,
    };
    for (index, x) in samples.iter().enumerate() {
        let wrap = |source| DriftError { index, source };
        let analytic = system.lyapunov_gradient(x).map_err(wrap)?;
        let generic = generic_gradient(f, spec, x).map_err(wrap)?;
        let fd = finite_difference_gradient(|y| system.lyapunov(y), x, 1e-6).map_err(wrap)?;
        let scale = numerics::norm(&analytic);
        if scale == 0.0 {
            continue;
        }
        let diff = |other: &[f64]| -> f64 {
            let d: Vec<f64> = analytic.iter().zip(other).map(|(a, b)| a - b).collect();
            numerics::norm(&d) / scale
        };
        rep.max_rel_generic = rep.max_rel_generic.max(diff(&generic));
        rep.max_rel_finite_difference = rep.max_rel_finite_difference.max(diff(&fd));
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPointScan {
    /// Samples that fell inside `V <= c`.
    pub in_sublevel: usize,
    /// Smallest `|grad V|^2 / V` among those with `V > 1e-20`.
    pub min_gradient_ratio: f64,
    /// Samples with `V > 1e-20` and a vanishing gradient.
    pub spurious: usize,
}

/// Looks for critical points of `V` inside `V^{-1}([0, c])` away from `V^{-1}(0)`.
pub fn critical_point_scan<const N: usize, S: FeedbackSystem<N>>(system: &S, samples: &[[f64; N]], c: f64) -> Result<CriticalPointScan, DriftError> {
    let mut scan = CriticalPointScan {
        in_sublevel: 0,
        min_gradient_ratio: f64::INFINITY,
        spurious: 0,
    };
    for (index, x) in samples.iter().enumerate() {
        let wrap = |source| DriftError { index, source };
        let v = system.lyapunov(x).map_err(wrap)?;
        if v > c {
            continue;
        }
        scan.in_sublevel += 1;
        if v <= 1e-20 {
            continue;
        }
        let g = system.lyapunov_gradient(x).map_err(wrap)?;
        let g2 = numerics::dot(&g, &g);
        if g2 == 0.0 {
            scan.spurious += 1;
        }
        scan.min_gradient_ratio = scan.min_gradient_ratio.min(g2 / v);
    }
    Ok(scan)
}

/// Base scheme used by the attractor study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyScheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StudyError {
    #[error("trajectory left the basin (V = {v:e} > {bound:e}) at t = {t} with h = {h}")]
    BasinViolation { h: f64, t: f64, v: f64, bound: f64 },
    #[error("integration failed with h = {h}: {source}")]
    Step {
        h: f64,
        #[source]
        source: StepError,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttractorStudyResult {
    pub step_sizes: Vec<f64>,
    /// Median of `V` over the last tenth of the horizon, per step size.
    pub plateau_values: Vec<f64>,
    /// First time `V` dropped to within twice its plateau, per step size.
    pub onset_times: Vec<f64>,
}

impl AttractorStudyResult {
    /// Plateaus never grow as the step size decreases.
    pub fn is_nonincreasing(&self) -> bool {
        self.plateau_values.windows(2).all(|w| w[1] <= w[0])
    }

    /// `plateau(largest h) / plateau(smallest h)`.
    pub fn shrink_factor(&self) -> f64 {
        match (self.plateau_values.first(), self.plateau_values.last()) {
            (Some(a), Some(b)) => a / b,
            _ => f64::NAN,
        }
    }
}

/// Finds `x = reference + s * direction` with `V(x) = target` by bisection on `s >= 0`.
pub fn state_with_lyapunov<const N: usize, S: FeedbackSystem<N>>(
    system: &S,
    reference: &[f64; N],
    direction: &[f64; N],
    target: f64,
) -> Result<[f64; N], StudyError> {
    let at = |s: f64| {
        let mut x = *reference;
        for (xi, di) in x.iter_mut().zip(direction) {
            *xi += s * di;
        }
        x
    };
    if target <= 0.0 {
        return Ok(*reference);
    }
    let mut hi = 1e-6;
    while system.lyapunov(&at(hi))? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(ParamError::new("v_init", "direction never reaches the requested level").into());
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if system.lyapunov(&at(mid))? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(0.5 * (lo + hi)))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Integrates the feedback field from a state with `V = v_init` for each step
/// size and records where `V` settles. Cells run concurrently.
pub fn attractor_step_study<const N: usize, S>(
    system: &S,
    reference: &[f64; N],
    direction: &[f64; N],
    scheme: StudyScheme,
    step_sizes: &[f64],
    v_init: f64,
    horizon: f64,
) -> Result<AttractorStudyResult, StudyError>
where
    S: FeedbackSystem<N> + Sync,
{
    if step_sizes.iter().any(|h| !(*h > 0.0) || *h >= horizon) {
        return Err(ParamError::new("step_sizes", "need 0 < h < horizon").into());
    }
    let bound = system.gain_bound().unwrap_or(f64::INFINITY);
    let x0 = state_with_lyapunov(system, reference, direction, v_init)?;
    let cell = |h: f64| -> Result<(f64, f64), StudyError> {
        let steps = (horizon / h * (1.0 + 1e-12)).floor() as usize;
        let field = |x: &[f64; N]| system.modified_field(x);
        let mut x = x0;
        let mut values = Vec::with_capacity(steps + 1);
        values.push(system.lyapunov(&x)?);
        for k in 0..steps {
            x = match scheme {
                StudyScheme::Euler => euler_step(&field, &x, h),
                StudyScheme::Rk4 => rk4_step(&field, &x, h),
            }
            .map_err(|source| StudyError::Step { h, source })?;
            let v = system.lyapunov(&x)?;
            if v > bound.max(v_init) {
                return Err(StudyError::BasinViolation { h, t: (k + 1) as f64 * h, v, bound });
            }
            values.push(v);
        }
        let tail_start = values.len() - (values.len() / 10).max(1);
        let plateau = median(&mut values[tail_start..].to_vec());
        let onset = values
            .iter()
            .position(|v| *v <= 2.0 * plateau)
            .map_or(horizon, |k| k as f64 * h);
        Ok((plateau, onset))
    };
    let results: Vec<Result<(f64, f64), StudyError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = step_sizes.iter().map(|&h| scope.spawn(move || cell(h))).collect();
        handles.into_iter().map(|j| j.join().expect("study cell panicked")).collect()
    });
    let mut plateau_values = Vec::new();
    let mut onset_times = Vec::new();
    for r in results {
        let (p, o) = r?;
        plateau_values.push(p);
        onset_times.push(o);
    }
    Ok(AttractorStudyResult {
        step_sizes: step_sizes.to_vec(),
        plateau_values,
        onset_times,
    })
}

/// Random states for property checks. All samplers are deterministic given the RNG.
pub mod sampling {
    use rand::Rng;

    use crate::kepler::{self, KeplerParams, OrbitalState};
    use crate::numerics::{rotation_from_axis_angle, Mat3, Vec3};
    use crate::rigid_body::RigidBodyState;

    fn uniform_vec3<R: Rng>(rng: &mut R, half_width: f64) -> Vec3 {
        Vec3::new(
            rng.gen_range(-half_width..half_width),
            rng.gen_range(-half_width..half_width),
            rng.gen_range(-half_width..half_width),
        )
    }

    /// `R = rotation * (I + E)` with entries of `E` in `[-0.2, 0.2]`, `Omega` in `[-2, 2]^3`.
    pub fn rigid_body_state<R: Rng>(rng: &mut R) -> RigidBodyState {
        loop {
            let rot = rotation_from_axis_angle(uniform_vec3(rng, 3.0));
            let mut e = [0.0; 9];
            e.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            let r = rot * (Mat3::IDENTITY + Mat3::from_row_slice(&e));
            if r.determinant() > 0.0 {
                return RigidBodyState::new(r, uniform_vec3(rng, 2.0));
            }
        }
    }

    /// Position with radius in `[0.3, 3]`, velocity in `[-2, 2]^3`.
    pub fn orbital_state<R: Rng>(rng: &mut R) -> OrbitalState {
        loop {
            let dir = uniform_vec3(rng, 1.0);
            let n = dir.norm();
            if n > 0.1 && n <= 1.0 {
                let r = rng.gen_range(0.3..3.0);
                return OrbitalState::new(dir * (r / n), uniform_vec3(rng, 2.0));
            }
        }
    }

    /// Point of the reference orbit at a uniform mean anomaly, displaced by
    /// `scale` times a uniform box perturbation.
    pub fn near_orbit_state<R: Rng>(rng: &mut R, params: &KeplerParams, scale: f64) -> OrbitalState {
        let m = rng.gen_range(0.0..std::f64::consts::TAU);
        let s = kepler::orbit_point(params, m).expect("elliptic reference orbit");
        OrbitalState::new(s.x + uniform_vec3(rng, scale), s.v + uniform_vec3(rng, scale))
    }
}
