//! Experiment configuration, run dispatch and CSV drift traces.
//!
//! A config file is flat `key = value` text grouped under `[section]`
//! headers; `#` starts a comment:
//!
//! ```text
//! [run]
//! system = rigid_body
//! method = feedback_euler
//! h = 1e-4
//! t_end = 50
//! output = trace.csv
//! stride = 100
//!
//! [gains]
//! k0 = 50
//! k1 = 100
//! k2 = 50
//!
//! [initial_condition]
//! preset = paper_default
//! ```
//!
//! `[initial_condition]` may instead list state components (`r11`..`r33`,
//! `omega1`..`omega3` for the rigid body, `x1`..`x3`, `v1`..`v3` for orbits,
//! or `eccentricity` for the perturbed problem). `[parameters]` holds model
//! constants (`i1`..`i3`, `mu`, `delta`). Anything left out takes its default.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::diagnostics::{DriftMetrics, DriftTracker};
use crate::error::ParamError;
use crate::feedback::{FeedbackSystem, FirstIntegralMap};
use crate::integrators::{
    euler_step, project, rk4_step, stormer_verlet_step, ProjectionConfig, StepError, VerletVariant,
};
use crate::kepler::{self, KeplerConstraint, KeplerGains, KeplerParams, OrbitalState};
use crate::numerics::Vec3;
use crate::perturbed_kepler::{
    self, CubicPerturbedPotential, PerturbedKeplerGains, PerturbedKeplerIntegrals, PerturbedKeplerParams,
};
use crate::rigid_body::{self, RigidBodyConstraint, RigidBodyGains, RigidBodyParams, RigidBodyState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    RigidBody,
    Kepler,
    PerturbedKepler,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [SystemKind::RigidBody, SystemKind::Kepler, SystemKind::PerturbedKepler];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::RigidBody => "rigid_body",
            SystemKind::Kepler => "kepler",
            SystemKind::PerturbedKepler => "perturbed_kepler",
        }
    }

    /// Projection tolerance used when the config does not set one.
    pub fn default_projection_tol(self) -> f64 {
        match self {
            SystemKind::RigidBody => 1e-4,
            SystemKind::Kepler => 0.005,
            SystemKind::PerturbedKepler => 1e-8,
        }
    }

    pub fn default_step(self) -> f64 {
        match self {
            SystemKind::RigidBody => 1e-4,
            SystemKind::Kepler => 0.005,
            SystemKind::PerturbedKepler => 0.03,
        }
    }

    fn gain_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::RigidBody => &["k0", "k1", "k2"],
            _ => &["k1", "k2"],
        }
    }

    fn parameter_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::RigidBody => &["i1", "i2", "i3"],
            SystemKind::Kepler => &["mu"],
            SystemKind::PerturbedKepler => &["mu", "delta"],
        }
    }

    fn initial_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::RigidBody => &[
                "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "omega1", "omega2", "omega3",
            ],
            SystemKind::Kepler => &["x1", "x2", "x3", "v1", "v2", "v3"],
            SystemKind::PerturbedKepler => &["x1", "x2", "x3", "v1", "v2", "v3", "eccentricity"],
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::InvalidValue {
                key: "system".into(),
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    FeedbackEuler,
    FeedbackRk4,
    Euler,
    Rk4,
    ProjectionEuler,
    Splitting,
    StormerVerletA,
    StormerVerletB,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::FeedbackEuler,
        Method::FeedbackRk4,
        Method::Euler,
        Method::Rk4,
        Method::ProjectionEuler,
        Method::Splitting,
        Method::StormerVerletA,
        Method::StormerVerletB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FeedbackEuler => "feedback_euler",
            Method::FeedbackRk4 => "feedback_rk4",
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::ProjectionEuler => "projection_euler",
            Method::Splitting => "splitting",
            Method::StormerVerletA => "stormer_verlet_a",
            Method::StormerVerletB => "stormer_verlet_b",
        }
    }

    /// Splitting needs the rigid-body axis flows; Störmer-Verlet needs a
    /// position-only acceleration.
    pub fn supports(self, system: SystemKind) -> bool {
        match self {
            Method::Splitting => system == SystemKind::RigidBody,
            Method::StormerVerletA | Method::StormerVerletB => system != SystemKind::RigidBody,
            _ => true,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ConfigError::InvalidValue {
                key: "method".into(),
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Standard,
    /// Named overrides of the default state components.
    Values(BTreeMap<String, f64>),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("method {method} is not available for system {system}")]
    Incompatible { system: SystemKind, method: Method },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("cannot use {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub method: Method,
    pub h: f64,
    pub t_end: f64,
    pub gains: BTreeMap<String, f64>,
    pub parameters: BTreeMap<String, f64>,
    pub initial_condition: InitialCondition,
    pub output_path: PathBuf,
    /// Write every `sample_stride`-th step to the CSV.
    pub sample_stride: usize,
    /// Overrides the per-system projection tolerance.
    pub projection_tol: Option<f64>,
}

impl ExperimentConfig {
    /// Reference step size and defaults for `system`, writing to `output_path`.
    pub fn new(system: SystemKind, method: Method, t_end: f64, output_path: impl Into<PathBuf>) -> Self {
        Self {
            system,
            method,
            h: system.default_step(),
            t_end,
            gains: BTreeMap::new(),
            parameters: BTreeMap::new(),
            initial_condition: InitialCondition::Standard,
            output_path: output_path.into(),
            sample_stride: 1,
            projection_tol: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut section = String::new();
        let mut run: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut gains = BTreeMap::new();
        let mut parameters = BTreeMap::new();
        let mut initial = BTreeMap::new();
        let mut preset = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                if !matches!(section.as_str(), "run" | "gains" | "parameters" | "initial_condition") {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        message: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            match section.as_str() {
                "run" => {
                    run.insert(key, (line_no, value));
                }
                "gains" => {
                    gains.insert(key.clone(), parse_real(&key, &value)?);
                }
                "parameters" => {
                    parameters.insert(key.clone(), parse_real(&key, &value)?);
                }
                "initial_condition" if key == "preset" => {
                    if value != "paper_default" {
                        return Err(ConfigError::InvalidValue { key, value });
                    }
                    preset = Some(value);
                }
                "initial_condition" => {
                    initial.insert(key.clone(), parse_real(&key, &value)?);
                }
                _ => {
                    return Err(ConfigError::Syntax {
                        line: line_no,
                        message: "key outside of any section".into(),
                    })
                }
            }
        }
        if preset.is_some() && !initial.is_empty() {
            return Err(ConfigError::InvalidValue {
                key: "preset".into(),
                value: "paper_default together with explicit components".into(),
            });
        }

        let take = |run: &mut BTreeMap<String, (usize, String)>, key: &str| run.remove(key).map(|(_, v)| v);
        let system: SystemKind = take(&mut run, "system").ok_or(ConfigError::Missing("system"))?.parse()?;
        let method: Method = take(&mut run, "method").ok_or(ConfigError::Missing("method"))?.parse()?;
        let t_end = parse_real("t_end", &take(&mut run, "t_end").ok_or(ConfigError::Missing("t_end"))?)?;
        let output_path = PathBuf::from(take(&mut run, "output").ok_or(ConfigError::Missing("output"))?);
        let h = match take(&mut run, "h") {
            Some(v) => parse_real("h", &v)?,
            None => system.default_step(),
        };
        let sample_stride = match take(&mut run, "stride") {
            Some(v) => v.parse().map_err(|_| ConfigError::InvalidValue { key: "stride".into(), value: v })?,
            None => 1,
        };
        let projection_tol = take(&mut run, "projection_tol")
            .map(|v| parse_real("projection_tol", &v))
            .transpose()?;
        if let Some((key, _)) = run.into_iter().next() {
            return Err(ConfigError::UnknownKey { section: "run".into(), key });
        }

        let cfg = Self {
            system,
            method,
            h,
            t_end,
            gains,
            parameters,
            initial_condition: if initial.is_empty() {
                InitialCondition::Standard
            } else {
                InitialCondition::Values(initial)
            },
            output_path,
            sample_stride,
            projection_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Text form accepted by [`ExperimentConfig::parse`].
    pub fn serialize(&self) -> String {
        let mut out = String::from("[run]\n");
        out += &format!("system = {}\nmethod = {}\n", self.system, self.method);
        out += &format!("h = {:e}\nt_end = {:e}\n", self.h, self.t_end);
        out += &format!("output = {}\nstride = {}\n", self.output_path.display(), self.sample_stride);
        if let Some(tol) = self.projection_tol {
            out += &format!("projection_tol = {tol:e}\n");
        }
        let section = |out: &mut String, name: &str, map: &BTreeMap<String, f64>| {
            if !map.is_empty() {
                *out += &format!("\n[{name}]\n");
                for (k, v) in map {
                    *out += &format!("{k} = {v:e}\n");
                }
            }
        };
        section(&mut out, "gains", &self.gains);
        section(&mut out, "parameters", &self.parameters);
        match &self.initial_condition {
            InitialCondition::Standard => out += "\n[initial_condition]\npreset = paper_default\n",
            InitialCondition::Values(map) => section(&mut out, "initial_condition", map),
        }
        out
    }

    /// Checks key names, ranges and the system/method pairing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.method.supports(self.system) {
            return Err(ConfigError::Incompatible {
                system: self.system,
                method: self.method,
            });
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(ParamError::new("h", "step size must be positive").into());
        }
        if !(self.t_end.is_finite() && self.h < self.t_end) {
            return Err(ParamError::new("t_end", "need h < t_end").into());
        }
        if self.sample_stride == 0 {
            return Err(ParamError::new("stride", "must be at least 1").into());
        }
        if let Some(tol) = self.projection_tol {
            if !(tol > 0.0) {
                return Err(ParamError::new("projection_tol", "must be positive").into());
            }
        }
        let check = |section: &str, map: &BTreeMap<String, f64>, allowed: &[&str]| {
            match map.keys().find(|k| !allowed.contains(&k.as_str())) {
                Some(key) => Err(ConfigError::UnknownKey {
                    section: section.into(),
                    key: key.clone(),
                }),
                None => Ok(()),
            }
        };
        check("gains", &self.gains, self.system.gain_names())?;
        check("parameters", &self.parameters, self.system.parameter_names())?;
        if let InitialCondition::Values(map) = &self.initial_condition {
            check("initial_condition", map, self.system.initial_names())?;
            if map.contains_key("eccentricity") && map.keys().any(|k| k != "eccentricity") {
                return Err(ConfigError::InvalidValue {
                    key: "eccentricity".into(),
                    value: "cannot be combined with state components".into(),
                });
            }
        }
        Ok(())
    }
}

fn parse_real(key: &str, value: &str) -> Result<f64, ConfigError> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
        })
}

/// `floor(t_end / h)`, tolerant of the last ulp when `t_end` is a multiple of `h`.
pub fn step_count(t_end: f64, h: f64) -> usize {
    let ratio = t_end / h;
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        ratio.floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metric_names: Vec<&'static str>,
    /// Largest value of each metric over every step, not just written rows.
    pub max_drift: Vec<f64>,
    pub final_v: f64,
    pub wall_time: Duration,
    pub steps_taken: usize,
}

impl RunSummary {
    pub fn max_of(&self, metric: &str) -> Option<f64> {
        self.metric_names
            .iter()
            .position(|m| *m == metric)
            .map(|i| self.max_drift[i])
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("step {step} (t = {t}): {source}; partial trace kept")]
    Domain {
        step: usize,
        t: f64,
        #[source]
        source: StepError,
        partial: Box<RunSummary>,
    },
    #[error("writing trace: {0}")]
    Csv(#[from] csv::Error),
}

type Stepper<'a, const N: usize> = Box<dyn FnMut(&[f64; N]) -> Result<[f64; N], StepError> + 'a>;

fn stepper<'a, const N: usize, S, C>(
    system: &'a S,
    method: Method,
    h: f64,
    projection: Option<ProjectionConfig<C>>,
    special: Option<Stepper<'a, N>>,
) -> Stepper<'a, N>
where
    S: FeedbackSystem<N>,
    C: FirstIntegralMap + 'a,
{
    let plain = move |x: &[f64; N]| system.field(x);
    let modified = move |x: &[f64; N]| system.modified_field(x);
    match method {
        Method::FeedbackEuler => Box::new(move |x| euler_step(&modified, x, h)),
        Method::FeedbackRk4 => Box::new(move |x| rk4_step(&modified, x, h)),
        Method::Euler => Box::new(move |x| euler_step(&plain, x, h)),
        Method::Rk4 => Box::new(move |x| rk4_step(&plain, x, h)),
        Method::ProjectionEuler => {
            let cfg = projection.expect("projection data for projection method");
            Box::new(move |x| project(&cfg, &euler_step(&plain, x, h)?))
        }
        Method::Splitting | Method::StormerVerletA | Method::StormerVerletB => {
            special.expect("system-specific stepper")
        }
    }
}

fn orbital_verlet<'a, S: FeedbackSystem<6>>(system: &'a S, h: f64, variant: VerletVariant) -> Stepper<'a, 6> {
    let accel = move |q: &[f64; 3]| -> Result<[f64; 3], crate::DomainError> {
        // the velocity half of the state does not affect the acceleration
        let f = system.field(&[q[0], q[1], q[2], 0.0, 0.0, 0.0])?;
        Ok([f[3], f[4], f[5]])
    };
    Box::new(move |x| {
        let (q, v) = stormer_verlet_step(accel, &[x[0], x[1], x[2]], &[x[3], x[4], x[5]], h, variant)?;
        Ok([q[0], q[1], q[2], v[0], v[1], v[2]])
    })
}

fn verlet_variant(method: Method) -> Option<VerletVariant> {
    match method {
        Method::StormerVerletA => Some(VerletVariant::A),
        Method::StormerVerletB => Some(VerletVariant::B),
        _ => None,
    }
}

fn get(map: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    map.get(key).copied().unwrap_or(default)
}

fn initial_values(cfg: &ExperimentConfig) -> BTreeMap<String, f64> {
    match &cfg.initial_condition {
        InitialCondition::Standard => BTreeMap::new(),
        InitialCondition::Values(v) => v.clone(),
    }
}

/// A fully built experiment: system parameters plus initial state.
pub enum PreparedSystem {
    RigidBody(RigidBodyParams, RigidBodyState),
    Kepler(KeplerParams, OrbitalState),
    PerturbedKepler(PerturbedKeplerParams, OrbitalState),
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedSystem, ConfigError> {
    cfg.validate()?;
    let g = &cfg.gains;
    let p = &cfg.parameters;
    let ic = initial_values(cfg);
    Ok(match cfg.system {
        SystemKind::RigidBody => {
            let d = rigid_body::standard_initial_state().to_array();
            let mut x = [0.0; 12];
            for (i, name) in cfg.system.initial_names().iter().enumerate() {
                x[i] = get(&ic, name, d[i]);
            }
            let s0 = RigidBodyState::from_array(&x);
            s0.validate()
                .map_err(|e| ParamError::new("initial_condition", e.to_string()))?;
            let gains = RigidBodyGains {
                k0: get(g, "k0", 50.0),
                k1: get(g, "k1", 100.0),
                k2: get(g, "k2", 50.0),
            };
            let inertia = Vec3::new(get(p, "i1", 3.0), get(p, "i2", 2.0), get(p, "i3", 1.0));
            PreparedSystem::RigidBody(RigidBodyParams::from_initial_state(inertia, gains, &s0)?, s0)
        }
        SystemKind::Kepler => {
            let s0 = orbital_state(&ic, kepler::standard_initial_state());
            let gains = KeplerGains {
                k1: get(g, "k1", 4.0),
                k2: get(g, "k2", 2.0),
            };
            PreparedSystem::Kepler(KeplerParams::from_initial_state(get(p, "mu", 1.0), gains, &s0)?, s0)
        }
        SystemKind::PerturbedKepler => {
            let base = match ic.get("eccentricity") {
                Some(e) if (0.0..1.0).contains(e) => perturbed_kepler::standard_initial_state(*e),
                Some(e) => return Err(ParamError::new("eccentricity", format!("{e} is outside [0, 1)")).into()),
                None => perturbed_kepler::standard_initial_state(0.6),
            };
            let s0 = orbital_state(&ic, base);
            let gains = PerturbedKeplerGains {
                k1: get(g, "k1", 2.0),
                k2: get(g, "k2", 3.0),
            };
            let pot = CubicPerturbedPotential {
                mu: get(p, "mu", 1.0),
                delta: get(p, "delta", 0.0025),
            };
            if !(pot.mu > 0.0) {
                return Err(ParamError::new("mu", "must be positive").into());
            }
            PreparedSystem::PerturbedKepler(PerturbedKeplerParams::from_initial_state(pot, gains, &s0)?, s0)
        }
    })
}

fn orbital_state(ic: &BTreeMap<String, f64>, base: OrbitalState) -> OrbitalState {
    let d = base.to_array();
    let names = ["x1", "x2", "x3", "v1", "v2", "v3"];
    let mut x = [0.0; 6];
    for (i, name) in names.iter().enumerate() {
        x[i] = get(ic, name, d[i]);
    }
    OrbitalState::from_array(&x)
}

pub fn state_column_names(system: SystemKind) -> Vec<String> {
    match system {
        SystemKind::RigidBody => {
            let mut v: Vec<String> = (1..=3)
                .flat_map(|i| (1..=3).map(move |j| format!("R{i}{j}")))
                .collect();
            v.extend((1..=3).map(|i| format!("Omega{i}")));
            v
        }
        _ => ["x1", "x2", "x3", "v1", "v2", "v3"].iter().map(|s| s.to_string()).collect(),
    }
}

/// Runs the configured experiment and writes its CSV trace.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    run_experiment_observed(cfg, |_, _| {})
}

/// Like [`run_experiment`], additionally handing every state `(t, x)` to `observe`.
pub fn run_experiment_observed<O>(cfg: &ExperimentConfig, mut observe: O) -> Result<RunSummary, RunError>
where
    O: FnMut(f64, &[f64]),
{
    let prepared = prepare(cfg)?;
    let file = File::create(&cfg.output_path).map_err(|source| ConfigError::Io {
        path: cfg.output_path.clone(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(file);
    let h = cfg.h;
    let method = cfg.method;
    let names = state_column_names(cfg.system);
    let tol = cfg.projection_tol.unwrap_or(cfg.system.default_projection_tol());
    const MAX_PROJECTION_ITER: usize = 100;
    match prepared {
        PreparedSystem::RigidBody(p, s0) => {
            let proj = ProjectionConfig {
                constraint: RigidBodyConstraint { inertia: p.inertia },
                target: p.constraint_target(),
                tol,
                max_iter: MAX_PROJECTION_ITER,
            };
            let special: Option<Stepper<'_, 12>> = (method == Method::Splitting).then(|| {
                let p = &p;
                Box::new(move |x: &[f64; 12]| {
                    Ok(rigid_body::rb_splitting_step(p, &RigidBodyState::from_array(x), h).to_array())
                }) as Stepper<'_, 12>
            });
            let step = stepper(&p, method, h, Some(proj), special);
            drive(cfg, &p, s0.to_array(), &names, step, &mut writer, &mut observe)
        }
        PreparedSystem::Kepler(p, s0) => {
            let proj = ProjectionConfig {
                constraint: KeplerConstraint::new(&p),
                target: KeplerConstraint::new(&p).target(&p),
                tol,
                max_iter: MAX_PROJECTION_ITER,
            };
            let special = verlet_variant(method).map(|v| orbital_verlet(&p, h, v));
            let step = stepper(&p, method, h, Some(proj), special);
            drive(cfg, &p, s0.to_array(), &names, step, &mut writer, &mut observe)
        }
        PreparedSystem::PerturbedKepler(p, s0) => {
            let mut target = vec![p.e0];
            target.extend(p.l0.to_array());
            let proj = ProjectionConfig {
                constraint: PerturbedKeplerIntegrals { potential: p.potential },
                target,
                tol,
                max_iter: MAX_PROJECTION_ITER,
            };
            let special = verlet_variant(method).map(|v| orbital_verlet(&p, h, v));
            let step = stepper(&p, method, h, Some(proj), special);
            drive(cfg, &p, s0.to_array(), &names, step, &mut writer, &mut observe)
        }
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn drive<const N: usize, S, W, O>(
    cfg: &ExperimentConfig,
    system: &S,
    x0: [f64; N],
    state_names: &[String],
    mut step: Stepper<'_, N>,
    writer: &mut csv::Writer<W>,
    observe: &mut O,
) -> Result<RunSummary, RunError>
where
    S: FeedbackSystem<N> + DriftMetrics<N>,
    W: std::io::Write,
    O: FnMut(f64, &[f64]),
{
    let start = Instant::now();
    let metric_names = system.metric_names();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(state_names.iter().cloned());
    header.push("V".into());
    header.extend(metric_names.iter().map(|s| s.to_string()));
    writer.write_record(&header)?;

    let steps = step_count(cfg.t_end, cfg.h);
    let mut tracker = DriftTracker::new(system, x0);
    let mut row = Vec::with_capacity(header.len());
    let mut x = x0;
    let summary = |tracker: &DriftTracker<'_, S, N>, taken: usize| RunSummary {
        metric_names: metric_names.to_vec(),
        max_drift: tracker.max_metrics().to_vec(),
        final_v: tracker.last_v(),
        wall_time: start.elapsed(),
        steps_taken: taken,
    };
    let mut record = |k: usize, x: &[f64; N], tracker: &mut DriftTracker<'_, S, N>, writer: &mut csv::Writer<W>| -> Result<Option<StepError>, csv::Error> {
        let t = k as f64 * cfg.h;
        observe(t, x);
        let sample = match tracker.observe(t, x) {
            Ok(s) => s,
            Err(e) => return Ok(Some(StepError::Domain(e.source))),
        };
        if k % cfg.sample_stride == 0 || k == steps {
            row.clear();
            row.push(fmt_real(t));
            row.extend(x.iter().map(|v| fmt_real(*v)));
            row.push(fmt_real(sample.v));
            row.extend(sample.metrics.iter().map(|v| fmt_real(*v)));
            writer.write_record(&row)?;
        }
        Ok(None)
    };

    let fail = |k: usize, source: StepError, tracker: &DriftTracker<'_, S, N>, writer: &mut csv::Writer<W>| -> RunError {
        if let Err(e) = writer.flush() {
            return RunError::Csv(e.into());
        }
        RunError::Domain {
            step: k,
            t: k as f64 * cfg.h,
            source,
            partial: Box::new(summary(tracker, k)),
        }
    };

    if let Some(err) = record(0, &x, &mut tracker, writer)? {
        return Err(fail(0, err, &tracker, writer));
    }
    for k in 0..steps {
        x = match step(&x) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => next,
            Ok(_) => return Err(fail(k, StepError::NonFinite, &tracker, writer)),
            Err(e) => return Err(fail(k, e, &tracker, writer)),
        };
        if let Some(err) = record(k + 1, &x, &mut tracker, writer)? {
            return Err(fail(k + 1, err, &tracker, writer));
        }
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(summary(&tracker, steps))
}

/// Figure identifiers; each figure of a system reuses the same set of runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FigureId {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
    F8,
    F9,
    F10,
}

impl FigureId {
    pub const ALL: [FigureId; 10] = [
        FigureId::F1,
        FigureId::F2,
        FigureId::F3,
        FigureId::F4,
        FigureId::F5,
        FigureId::F6,
        FigureId::F7,
        FigureId::F8,
        FigureId::F9,
        FigureId::F10,
    ];

    pub fn system(self) -> SystemKind {
        match self {
            FigureId::F1 | FigureId::F2 | FigureId::F3 | FigureId::F4 => SystemKind::RigidBody,
            FigureId::F5 | FigureId::F6 | FigureId::F7 => SystemKind::Kepler,
            _ => SystemKind::PerturbedKepler,
        }
    }

    /// Method curves shown in the figure, with their step sizes.
    pub fn curves(self) -> Vec<(Method, f64)> {
        match self.system() {
            SystemKind::RigidBody => vec![
                (Method::FeedbackEuler, 1e-4),
                (Method::ProjectionEuler, 1e-4),
                (Method::Splitting, 1e-4),
                (Method::Euler, 1e-4),
            ],
            SystemKind::Kepler => vec![
                (Method::FeedbackEuler, 0.005),
                (Method::ProjectionEuler, 0.005),
                (Method::StormerVerletA, 0.005),
                (Method::StormerVerletB, 0.005),
            ],
            SystemKind::PerturbedKepler => vec![
                (Method::FeedbackEuler, 0.03),
                (Method::ProjectionEuler, 0.03),
                (Method::StormerVerletA, 0.03),
                // stands in for a tight-tolerance adaptive reference solution
                (Method::Rk4, 1e-4),
            ],
        }
    }

    /// Horizon of the published figure.
    pub fn full_horizon(self) -> f64 {
        match self.system() {
            SystemKind::RigidBody => 1000.0,
            SystemKind::Kepler => 1000.0 * kepler::orbit_geometry(&KeplerParams::standard_setup().0)
                .expect("default orbit is elliptic")
                .period,
            SystemKind::PerturbedKepler => 200.0,
        }
    }

    /// Characteristic period of the underlying motion.
    pub fn characteristic_period(self) -> f64 {
        match self.system() {
            SystemKind::RigidBody => RIGID_BODY_OMEGA_PERIOD,
            SystemKind::Kepler => self.full_horizon() / 1000.0,
            SystemKind::PerturbedKepler => PERTURBED_RADIAL_PERIOD,
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for FigureId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::InvalidValue {
                key: "id".into(),
                value: s.into(),
            })
    }
}

/// Period of the body angular velocity for the default rigid-body setup.
pub const RIGID_BODY_OMEGA_PERIOD: f64 = 6.4227;
/// Radial period of the default perturbed orbit.
pub const PERTURBED_RADIAL_PERIOD: f64 = 5.613;
/// Scaled horizons must cover at least this many characteristic periods.
pub const MIN_FIGURE_PERIODS: f64 = 5.0;

#[derive(Debug)]
pub struct FigureCurve {
    pub method: Method,
    pub h: f64,
    pub path: PathBuf,
    pub summary: RunSummary,
}

/// Runs every method curve of a figure at `scale` times the published horizon,
/// one CSV per curve named `<figure>_<method>.csv`. Curves run concurrently.
pub fn replicate_figure(id: FigureId, scale: f64, out_dir: &Path) -> Result<Vec<FigureCurve>, RunError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(ConfigError::from(ParamError::new("scale", "must lie in (0, 1]")).into());
    }
    let t_end = scale * id.full_horizon();
    let periods = t_end / id.characteristic_period();
    if periods < MIN_FIGURE_PERIODS {
        return Err(ConfigError::from(ParamError::new(
            "scale",
            format!("horizon {t_end} covers only {periods:.2} periods; need {MIN_FIGURE_PERIODS}"),
        ))
        .into());
    }
    std::fs::create_dir_all(out_dir).map_err(|source| ConfigError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let configs: Vec<ExperimentConfig> = id
        .curves()
        .into_iter()
        .map(|(method, h)| {
            let mut cfg = ExperimentConfig::new(
                id.system(),
                method,
                t_end,
                out_dir.join(format!("{}_{}.csv", id.to_string().to_lowercase(), method)),
            );
            cfg.h = h;
            // about 10^4 rows per curve
            cfg.sample_stride = (step_count(t_end, h) / 10_000).max(1);
            cfg
        })
        .collect();
    let results: Vec<Result<RunSummary, RunError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || run_experiment(c))).collect();
        handles.into_iter().map(|j| j.join().expect("figure run panicked")).collect()
    });
    configs
        .into_iter()
        .zip(results)
        .map(|(cfg, r)| {
            Ok(FigureCurve {
                method: cfg.method,
                h: cfg.h,
                path: cfg.output_path,
                summary: r?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perihelion {
    pub t: f64,
    pub position: Vec3,
}

/// Detects perihelion passages (local minima of `|x|`) in a stream of orbital
/// states, refining each by parabolic interpolation over three samples.
/// Minima closer than about half a revolution to the previous passage are
/// ignored, which filters jitter from methods that jump between steps.
#[derive(Debug, Clone, Default)]
pub struct PerihelionTracker {
    window: Vec<(f64, Vec3)>,
    start: Option<Vec3>,
    normal: Option<Vec3>,
    swept: f64,
    passages: Vec<Perihelion>,
}

/// Angle the orbit must sweep between accepted passages.
const MIN_SWEEP: f64 = 0.9 * std::f64::consts::PI;

impl PerihelionTracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn signed_angle(&self, a: Vec3, b: Vec3) -> f64 {
        let c = a.cross(b);
        let sin = match self.normal {
            Some(n) => c.dot(n),
            None => c.norm(),
        };
        sin.atan2(a.dot(b))
    }

    /// `x` holds at least the three position components.
    pub fn observe(&mut self, t: f64, x: &[f64]) {
        let pos = Vec3::new(x[0], x[1], x[2]);
        self.start.get_or_insert(pos);
        if let Some(&(_, last)) = self.window.last() {
            if self.normal.is_none() {
                let c = last.cross(pos);
                if c.norm() > 0.0 {
                    self.normal = Some(c * (1.0 / c.norm()));
                }
            }
            self.swept += self.signed_angle(last, pos).abs();
        }
        self.window.push((t, pos));
        if self.window.len() > 3 {
            self.window.remove(0);
        }
        if self.window.len() < 3 || self.swept < MIN_SWEEP {
            return;
        }
        let r: Vec<f64> = self.window.iter().map(|(_, p)| p.norm()).collect();
        if !(r[1] < r[0] && r[1] <= r[2]) {
            return;
        }
        let curvature = r[0] - 2.0 * r[1] + r[2];
        let s = if curvature > 0.0 { 0.5 * (r[0] - r[2]) / curvature } else { 0.0 };
        // quadratic through s = -1, 0, 1
        let w = [0.5 * s * (s - 1.0), 1.0 - s * s, 0.5 * s * (s + 1.0)];
        let mut p = Vec3::ZERO;
        for (wi, (_, pi)) in w.iter().zip(&self.window) {
            p = p + *pi * *wi;
        }
        let (t0, t1) = (self.window[1].0, self.window[2].0);
        self.passages.push(Perihelion {
            t: t0 + s * (t1 - t0),
            position: p,
        });
        self.swept = 0.0;
    }

    pub fn passages(&self) -> &[Perihelion] {
        &self.passages
    }

    /// Mean advance of the perihelion direction per orbit, in radians.
    pub fn precession_per_orbit(&self) -> Option<f64> {
        if self.passages.len() < 2 {
            return None;
        }
        let total: f64 = self
            .passages
            .windows(2)
            .map(|w| self.signed_angle(w[0].position, w[1].position))
            .sum();
        Some(total / (self.passages.len() - 1) as f64)
    }

    /// Largest distance between a perihelion passage and the first observed position.
    pub fn max_return_distance(&self) -> Option<f64> {
        let start = self.start?;
        self.passages
            .iter()
            .map(|p| (p.position - start).norm())
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatorResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn validator(name: &'static str, passed: bool, detail: String) -> ValidatorResult {
    ValidatorResult { name, passed, detail }
}

/// States along the unmodified RK4 flow from `x0`, which stay on `V = 0`
/// to within the integration error.
fn reference_samples<const N: usize, S: FeedbackSystem<N>>(system: &S, x0: [f64; N], t: f64, count: usize) -> Result<Vec<[f64; N]>, StepError> {
    let h = 1e-3;
    let per_sample = ((t / h) as usize / count).max(1);
    let field = |x: &[f64; N]| system.field(x);
    let mut out = vec![x0];
    let mut x = x0;
    while out.len() < count {
        for _ in 0..per_sample {
            x = rk4_step(&field, &x, h)?;
        }
        out.push(x);
    }
    Ok(out)
}

fn common_validators<const N: usize, S, F, G>(
    system: &S,
    integrals: &F,
    spec: &crate::feedback::FeedbackSpec,
    on_level_set: &[[f64; N]],
    random: impl Fn(&mut rand_chacha::ChaCha8Rng) -> [f64; N],
    rank_map: &G,
) -> Vec<ValidatorResult>
where
    S: FeedbackSystem<N>,
    F: FirstIntegralMap,
    G: FirstIntegralMap,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let states: Vec<[f64; N]> = (0..1000).map(|_| random(&mut rng)).collect();
    let mut out = Vec::new();
    match crate::diagnostics::orthogonality_residual(system, &states) {
        Ok(r) => out.push(validator("orthogonality", r <= 1e-12, format!("max residual {r:.3e} over {} states", states.len()))),
        Err(e) => out.push(validator("orthogonality", false, e.to_string())),
    }
    match crate::diagnostics::gradient_consistency(system, integrals, spec, &states) {
        Ok(r) => out.push(validator(
            "gradient",
            r.max_rel_generic <= 1e-12 && r.max_rel_finite_difference <= 1e-5,
            format!(
                "max rel error vs generic {:.3e}, vs finite differences {:.3e}",
                r.max_rel_generic, r.max_rel_finite_difference
            ),
        )),
        Err(e) => out.push(validator("gradient", false, e.to_string())),
    }
    let samples: Vec<Vec<f64>> = on_level_set.iter().map(|x| x.to_vec()).collect();
    match crate::diagnostics::check_rank_condition(rank_map, &samples) {
        Ok(r) => out.push(validator(
            "rank",
            r.passed,
            format!(
                "min singular value {:.3e}, rank {} of {} over {} states",
                r.min_singular_value,
                r.min_numeric_rank,
                r.required_rank,
                samples.len()
            ),
        )),
        Err(e) => out.push(validator("rank", false, e.to_string())),
    }
    out
}

/// Runs the hypothesis validators for the standard setup of `system`.
pub fn run_validators(system: SystemKind) -> Result<Vec<ValidatorResult>, StepError> {
    use crate::diagnostics::sampling;
    Ok(match system {
        SystemKind::RigidBody => {
            let (p, s0) = RigidBodyParams::standard_setup();
            let level = reference_samples(&p, s0.to_array(), RIGID_BODY_OMEGA_PERIOD, 20)?;
            let mut out = common_validators(
                &p,
                &rigid_body::RigidBodyIntegrals { inertia: p.inertia },
                &p.feedback_spec(),
                &level,
                |r| sampling::rigid_body_state(r).to_array(),
                &RigidBodyConstraint { inertia: p.inertia },
            );
            let bound = rigid_body::rb_gain_bound(&p);
            out.push(validator("gain bound", bound > 0.0, format!("attraction guaranteed for V < {bound}")));
            out
        }
        SystemKind::Kepler => {
            let (p, s0) = KeplerParams::standard_setup();
            let period = kepler::orbit_geometry(&p).expect("standard orbit is elliptic").period;
            let level = reference_samples(&p, s0.to_array(), period, 20)?;
            let mut out = common_validators(
                &p,
                &kepler::KeplerIntegrals { mu: p.mu },
                &p.feedback_spec(),
                &level,
                |r| sampling::orbital_state(r).to_array(),
                &KeplerConstraint::new(&p),
            );
            let bound = kepler::kepler_gain_bound(&p);
            out.push(validator("gain bound", bound > 0.0, format!("attraction guaranteed for V < {bound}")));
            out
        }
        SystemKind::PerturbedKepler => {
            let (p, s0) = PerturbedKeplerParams::standard_setup();
            let level = reference_samples(&p, s0.to_array(), PERTURBED_RADIAL_PERIOD, 20)?;
            let mut out = common_validators(
                &p,
                &PerturbedKeplerIntegrals { potential: p.potential },
                &p.feedback_spec(),
                &level,
                |r| sampling::orbital_state(r).to_array(),
                &PerturbedKeplerIntegrals { potential: p.potential },
            );
            let (lo, hi) = perturbed_kepler::DEFAULT_BRACKET;
            match perturbed_kepler::pk_check_hypothesis(&p, lo, hi, 100_000) {
                Ok(rep) => out.push(validator(
                    "circular-orbit hypothesis",
                    rep.status == perturbed_kepler::HypothesisStatus::Satisfied,
                    format!(
                        "{:?} on [{lo}, {hi}]; roots {:?}",
                        rep.status,
                        rep.roots.iter().map(|c| (c.radius, c.energy_residual)).collect::<Vec<_>>()
                    ),
                )),
                Err(e) => out.push(validator("circular-orbit hypothesis", false, e.to_string())),
            }
            let c = perturbed_kepler::pk_check_compactness(&p, &s0, 1e-4, 1_000_000, 100.0)?;
            out.push(validator(
                "compact level set",
                c.bounded,
                format!(
                    "radial period {:.4}, max radius {:.4}, max speed {:.4}",
                    c.radial_period, c.max_radius, c.max_speed
                ),
            ));
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat3;

    fn sample_text() -> &'static str {
        "# demo\n[run]\nsystem = kepler\nmethod = stormer_verlet_a\nh = 0.005\nt_end = 10\noutput = out.csv\nstride = 5\n\n[gains]\nk1 = 4\n\n[initial_condition]\npreset = paper_default\n"
    }

    #[test]
    fn parse_reads_all_sections() {
        let cfg = ExperimentConfig::parse(sample_text()).unwrap();
        assert_eq!(cfg.system, SystemKind::Kepler);
        assert_eq!(cfg.method, Method::StormerVerletA);
        assert_eq!(cfg.h, 0.005);
        assert_eq!(cfg.sample_stride, 5);
        assert_eq!(cfg.gains["k1"], 4.0);
        assert_eq!(cfg.initial_condition, InitialCondition::Standard);
    }

    #[test]
    fn serialize_round_trips() {
        let cfg = ExperimentConfig::parse(sample_text()).unwrap();
        let again = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.serialize(), cfg.serialize());
    }

    #[test]
    fn incompatible_method_is_rejected() {
        let text = sample_text().replace("stormer_verlet_a", "splitting");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(ConfigError::Incompatible { .. })
        ));
        let mut cfg = ExperimentConfig::new(SystemKind::RigidBody, Method::StormerVerletB, 1.0, "x.csv");
        assert!(cfg.validate().is_err());
        cfg.method = Method::Splitting;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn malformed_configs_are_rejected() {
        for bad in [
            "[run]\nsystem kepler\n",
            "[oops]\n",
            "k = 1\n",
            "[run]\nsystem = kepler\nmethod = euler\nt_end = 1\noutput = o\nbogus = 1\n",
            "[run]\nsystem = kepler\nmethod = euler\nt_end = nan\noutput = o\n",
            "[run]\nsystem = kepler\nmethod = euler\nt_end = 1\nh = 2\noutput = o\n",
            "[run]\nsystem = kepler\nmethod = euler\nt_end = 1\noutput = o\n[gains]\nk0 = 1\n",
            "[run]\nsystem = kepler\nmethod = euler\noutput = o\n",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn step_count_is_floor() {
        assert_eq!(step_count(50.0, 1e-4), 500_000);
        assert_eq!(step_count(702.5, 0.005), 140_500);
        assert_eq!(step_count(1.0, 0.3), 3);
        assert_eq!(step_count(0.7, 0.1), 7);
    }

    #[test]
    fn validators_pass_for_standard_setups() {
        for system in SystemKind::ALL {
            for v in run_validators(system).unwrap() {
                assert!(v.passed, "{system} {}: {}", v.name, v.detail);
            }
        }
    }

    #[test]
    fn figure_ids_parse() {
        assert_eq!("F10".parse::<FigureId>().unwrap(), FigureId::F10);
        assert_eq!("f2".parse::<FigureId>().unwrap(), FigureId::F2);
        assert!("F11".parse::<FigureId>().is_err());
    }

    #[test]
    fn perihelion_of_circle_sampled_ellipse() {
        let (p, _) = KeplerParams::standard_setup();
        let mut tracker = PerihelionTracker::new();
        let n = 2000;
        for k in 0..=2 * n + 1 {
            let m = std::f64::consts::TAU * k as f64 / n as f64;
            let s = kepler::orbit_point(&p, m).unwrap();
            tracker.observe(k as f64, &s.to_array());
        }
        assert_eq!(tracker.passages().len(), 2);
        assert!(tracker.max_return_distance().unwrap() < 1e-9);
        assert!(tracker.precession_per_orbit().unwrap().abs() < 1e-9);
    }

    #[test]
    fn prepare_applies_initial_overrides() {
        let mut cfg = ExperimentConfig::new(SystemKind::RigidBody, Method::Euler, 1.0, "x.csv");
        cfg.initial_condition = InitialCondition::Values(BTreeMap::from([("r11".to_string(), -1.0)]));
        // det(R) < 0
        assert!(prepare(&cfg).is_err());
        cfg.initial_condition = InitialCondition::Values(BTreeMap::from([("omega1".to_string(), 2.0)]));
        let PreparedSystem::RigidBody(p, s) = prepare(&cfg).unwrap() else {
            panic!("wrong system")
        };
        assert_eq!(s.r, Mat3::IDENTITY);
        assert_eq!(p.e0, 0.5 * (3.0 * 4.0 + 2.0 + 1.0));
    }
}
