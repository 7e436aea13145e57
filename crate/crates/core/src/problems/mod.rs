//! Benchmark problem families and their configuration-file description.
//!
//! Running costs are pure regularization (small velocity and control
//! weights); the task itself is stated as an endpoint constraint.

pub mod costs;
pub mod lq;
pub mod mechanics;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Problem, StageFunctions, WrappedAngles};
use costs::{QuadraticCost, QuadraticTerminal, StackedConstraintStage, StackedEndpoint, StateTarget};
use lq::LinearStage;
use mechanics::{Cartpole, DoublePendulum, ForwardStage, Integrator, InverseStage, Mechanism, PointMass};

pub const FAMILIES: [&str; 5] = ["lqr", "point-mass", "cartpole", "dpend", "dpend-inverse"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsForm {
    /// Controls are the actuation inputs; no stagewise constraints.
    #[default]
    Forward,
    /// Controls are (accelerations, inputs) tied by a stagewise equality.
    Inverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", from = "RawSpec")]
pub struct ProblemSpec {
    /// One of [`FAMILIES`]; `<family>-inverse` selects the inverse form.
    pub family: String,
    pub form: DynamicsForm,
    pub horizon: usize,
    pub dt: f64,
    pub integrator: Integrator,
    /// Body masses (pendulum links; cart then pole; point mass).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<f64>>,
    pub gravity: f64,
    pub damping: f64,
    /// Actuated joints of the double pendulum (default: both).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actuated: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    /// Endpoint target `x_N = target` (default per family).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    pub velocity_weight: f64,
    pub control_weight: f64,
    /// `½ρ‖x_N ⊖ target‖²`; vanishes with its gradient on the endpoint
    /// constraint, so it shapes the sweep without moving the solution.
    pub terminal_weight: f64,
    /// Weight on accelerations in the inverse form.
    pub accel_weight: f64,
    /// Endpoint rows are repeated this many times (1 = no duplication).
    pub duplicate_endpoint: usize,
    /// Stagewise rows are repeated this many times (1 = no duplication).
    pub duplicate_stagewise: usize,
}

/// Configuration-file view: anything omitted takes the family default.
#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct RawSpec {
    family: String,
    form: Option<DynamicsForm>,
    horizon: Option<usize>,
    dt: Option<f64>,
    integrator: Option<Integrator>,
    masses: Option<Vec<f64>>,
    lengths: Option<Vec<f64>>,
    gravity: Option<f64>,
    damping: Option<f64>,
    actuated: Option<Vec<usize>>,
    initial_state: Option<Vec<f64>>,
    target: Option<Vec<f64>>,
    velocity_weight: Option<f64>,
    control_weight: Option<f64>,
    terminal_weight: Option<f64>,
    accel_weight: Option<f64>,
    duplicate_endpoint: Option<usize>,
    duplicate_stagewise: Option<usize>,
}

impl From<RawSpec> for ProblemSpec {
    fn from(r: RawSpec) -> Self {
        let mut s = ProblemSpec::new(&r.family);
        if let Some(v) = r.form {
            s.form = v;
        }
        if let Some(v) = r.horizon {
            s.horizon = v;
        }
        if let Some(v) = r.dt {
            s.dt = v;
        }
        if let Some(v) = r.integrator {
            s.integrator = v;
        }
        if r.masses.is_some() {
            s.masses = r.masses;
        }
        if r.lengths.is_some() {
            s.lengths = r.lengths;
        }
        if let Some(v) = r.gravity {
            s.gravity = v;
        }
        if let Some(v) = r.damping {
            s.damping = v;
        }
        if r.actuated.is_some() {
            s.actuated = r.actuated;
        }
        if r.initial_state.is_some() {
            s.initial_state = r.initial_state;
        }
        if r.target.is_some() {
            s.target = r.target;
        }
        if let Some(v) = r.velocity_weight {
            s.velocity_weight = v;
        }
        if let Some(v) = r.control_weight {
            s.control_weight = v;
        }
        if let Some(v) = r.terminal_weight {
            s.terminal_weight = v;
        }
        if let Some(v) = r.accel_weight {
            s.accel_weight = v;
        }
        if let Some(v) = r.duplicate_endpoint {
            s.duplicate_endpoint = v;
        }
        if let Some(v) = r.duplicate_stagewise {
            s.duplicate_stagewise = v;
        }
        s
    }
}

fn default_horizon() -> usize {
    20
}
fn default_dt() -> f64 {
    0.05
}
fn default_gravity() -> f64 {
    9.81
}
fn default_velocity_weight() -> f64 {
    1e-3
}
fn default_control_weight() -> f64 {
    1e-2
}
fn default_accel_weight() -> f64 {
    1e-6
}
fn default_terminal_weight() -> f64 {
    0.0
}

impl ProblemSpec {
    pub fn new(family: &str) -> Self {
        let mut s = Self {
            family: family.to_string(),
            form: DynamicsForm::Forward,
            horizon: default_horizon(),
            dt: default_dt(),
            integrator: Integrator::default(),
            masses: None,
            lengths: None,
            gravity: default_gravity(),
            damping: 0.0,
            actuated: None,
            initial_state: None,
            target: None,
            velocity_weight: default_velocity_weight(),
            control_weight: default_control_weight(),
            accel_weight: default_accel_weight(),
            terminal_weight: default_terminal_weight(),
            duplicate_endpoint: 1,
            duplicate_stagewise: 1,
        };
        if !family.starts_with("lqr") {
            s.terminal_weight = 10.0;
        }
        if family.starts_with("dpend") {
            s.horizon = 200;
            s.dt = 0.01;
        }
        s
    }

    pub fn with_form(mut self, form: DynamicsForm) -> Self {
        self.form = form;
        self
    }

    /// Base family name and effective dynamics form.
    pub fn resolve(&self) -> (&str, DynamicsForm) {
        match self.family.strip_suffix("-inverse") {
            Some(base) => (base, DynamicsForm::Inverse),
            None => (self.family.as_str(), self.form),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidOption(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.gravity >= 0.0) || !(self.damping >= 0.0) {
            return bad("gravity and damping must be non-negative");
        }
        let positive = |v: &Option<Vec<f64>>| v.as_ref().is_none_or(|v| v.iter().all(|&x| x > 0.0 && x.is_finite()));
        if !positive(&self.masses) || !positive(&self.lengths) {
            return bad("masses and lengths must be positive");
        }
        if self.velocity_weight < 0.0 || self.control_weight <= 0.0 || self.accel_weight < 0.0 || self.terminal_weight < 0.0 {
            return bad("weights must be non-negative (control weight positive)");
        }
        if self.duplicate_endpoint == 0 || self.duplicate_stagewise == 0 {
            return bad("duplication counts must be at least 1");
        }
        Ok(())
    }
}

fn pick(v: &Option<Vec<f64>>, default: &[f64], what: &str) -> Result<Vec<f64>> {
    match v {
        None => Ok(default.to_vec()),
        Some(v) if v.len() == default.len() => Ok(v.clone()),
        Some(v) => Err(Error::InvalidOption(format!("{what}: expected {} entries, got {}", default.len(), v.len()))),
    }
}

/// Build a problem from its description.
pub fn build(spec: &ProblemSpec) -> Result<Problem> {
    spec.validate()?;
    let (family, form) = spec.resolve();
    let mut problem = match family {
        "lqr" => build_lqr(spec, form)?,
        "point-mass" => {
            let m = pick(&spec.masses, &[1.0], "masses")?;
            let mech = PointMass { mass: m[0], drag: spec.damping.max(0.1) };
            build_mechanical(spec, form, mech, &[0.0; 4], &[1.0, 1.0, 0.0, 0.0])?
        }
        "cartpole" => {
            let m = pick(&spec.masses, &[1.0, 0.3], "masses")?;
            let l = pick(&spec.lengths, &[0.5], "lengths")?;
            let mech = Cartpole { cart_mass: m[0], pole_mass: m[1], length: l[0], gravity: spec.gravity };
            build_mechanical(spec, form, mech, &[0.0; 4], &[0.0, PI, 0.0, 0.0])?
        }
        "dpend" => {
            let m = pick(&spec.masses, &[1.0, 1.0], "masses")?;
            let l = pick(&spec.lengths, &[0.5, 0.5], "lengths")?;
            let actuated = spec.actuated.clone().unwrap_or_else(|| vec![0, 1]);
            if actuated.is_empty() || actuated.iter().any(|&i| i > 1) {
                return Err(Error::InvalidOption("actuated joints must be a non-empty subset of {0, 1}".into()));
            }
            let mech = DoublePendulum {
                masses: [m[0], m[1]],
                lengths: [l[0], l[1]],
                gravity: spec.gravity,
                damping: spec.damping,
                actuated,
            };
            build_mechanical(spec, form, mech, &[0.0; 4], &[PI, 0.0, 0.0, 0.0])?
        }
        _ => return Err(Error::UnknownFamily(spec.family.clone())),
    };
    if spec.duplicate_endpoint > 1 {
        problem = duplicate_endpoint(&problem, spec.duplicate_endpoint)?;
    }
    if spec.duplicate_stagewise > 1 {
        problem = duplicate_stagewise(&problem, spec.duplicate_stagewise)?;
    }
    Ok(problem)
}

fn state_vec(v: &Option<Vec<f64>>, default: &[f64], what: &str) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(pick(v, default, what)?))
}

/// Planar double integrator (`n_x = 4`, `n_u = 2`) driven to a target.
fn build_lqr(spec: &ProblemSpec, form: DynamicsForm) -> Result<Problem> {
    let dt = spec.dt;
    let a = DMatrix::from_row_slice(4, 4, &[1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(4, 2, &[0.5 * dt * dt, 0.0, 0.0, 0.5 * dt * dt, dt, 0.0, 0.0, dt]);
    let x0 = state_vec(&spec.initial_state, &[1.0, -1.0, 0.0, 0.0], "initial-state")?;
    let target = state_vec(&spec.target, &[0.0; 4], "target")?;
    let mut q = DMatrix::zeros(4, 4);
    q[(2, 2)] = spec.velocity_weight;
    q[(3, 3)] = spec.velocity_weight;
    let fwd = LinearStage::new(a, b, QuadraticCost::new(q, DMatrix::identity(2, 2) * spec.control_weight));
    let stage: Arc<dyn StageFunctions> = match form {
        DynamicsForm::Forward => Arc::new(fwd),
        DynamicsForm::Inverse => Arc::new(fwd.inverse_encoding(spec.control_weight.max(spec.accel_weight))),
    };
    Problem::new(
        x0,
        vec![stage; spec.horizon],
        Arc::new(QuadraticTerminal { q: DMatrix::identity(4, 4) * spec.terminal_weight, x_ref: target.clone(), angles: vec![] }),
        Arc::new(StateTarget { target, rows: (0..4).collect(), angles: vec![] }),
    )
}

fn build_mechanical<M: Mechanism>(
    spec: &ProblemSpec,
    form: DynamicsForm,
    mech: M,
    x0: &[f64],
    target: &[f64],
) -> Result<Problem> {
    let nq = mech.dofs();
    let nx = 2 * nq;
    let ntau = mech.actuation().ncols();
    let angles = mech.angles();
    let x0 = state_vec(&spec.initial_state, x0, "initial-state")?;
    let target = state_vec(&spec.target, target, "target")?;
    let mut q = DMatrix::zeros(nx, nx);
    for i in nq..nx {
        q[(i, i)] = spec.velocity_weight;
    }
    let mech = Arc::new(mech);
    let stage: Arc<dyn StageFunctions> = match form {
        DynamicsForm::Forward => {
            let cost = QuadraticCost::new(q, DMatrix::identity(ntau, ntau) * spec.control_weight);
            Arc::new(ForwardStage::new(mech, spec.dt, spec.integrator, cost))
        }
        DynamicsForm::Inverse => {
            let mut r = DMatrix::zeros(nq + ntau, nq + ntau);
            for i in 0..nq {
                r[(i, i)] = spec.accel_weight;
            }
            for i in nq..nq + ntau {
                r[(i, i)] = spec.control_weight;
            }
            Arc::new(InverseStage::new(mech, spec.dt, spec.integrator, QuadraticCost::new(q, r)))
        }
    };
    Ok(Problem::new(
        x0,
        vec![stage; spec.horizon],
        Arc::new(QuadraticTerminal {
            q: DMatrix::identity(nx, nx) * spec.terminal_weight,
            x_ref: target.clone(),
            angles: angles.clone(),
        }),
        Arc::new(StateTarget { target, rows: (0..nx).collect(), angles: angles.clone() }),
    )?
    .with_state_diff(Arc::new(WrappedAngles { indices: angles })))
}

/// The same problem with every endpoint row repeated `times` times:
/// rank-deficient but consistent.
pub fn duplicate_endpoint(problem: &Problem, times: usize) -> Result<Problem> {
    if times < 2 {
        return Err(Error::InvalidOption(format!("duplication count must be at least 2, got {times}")));
    }
    let mut p = problem.clone();
    p.endpoint = Arc::new(StackedEndpoint { inner: problem.endpoint.clone(), times });
    Ok(p)
}

/// The same problem with every stagewise constraint row repeated `times` times.
pub fn duplicate_stagewise(problem: &Problem, times: usize) -> Result<Problem> {
    if times < 2 {
        return Err(Error::InvalidOption(format!("duplication count must be at least 2, got {times}")));
    }
    let mut p = problem.clone();
    p.stages = problem
        .stages
        .iter()
        .map(|s| Arc::new(StackedConstraintStage { inner: s.clone(), times }) as Arc<dyn StageFunctions>)
        .collect();
    Ok(p)
}

/// Randomized cold start: states and controls perturbed uniformly within
/// `±magnitude` around the constant guess. Zero magnitude gives the constant
/// guess itself.
pub fn cold_start(problem: &Problem, seed: u64, magnitude: f64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let (mut xs, mut us) = problem.constant_guess();
    if magnitude == 0.0 {
        return (xs, us);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in xs.iter_mut().skip(1) {
        x.apply(|v| *v += magnitude * rng.random_range(-1.0..1.0));
    }
    for u in us.iter_mut() {
        u.apply(|v| *v += magnitude * rng.random_range(-1.0..1.0));
    }
    (xs, us)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_family() {
        assert_eq!(build(&ProblemSpec::new("acrobat")).unwrap_err(), Error::UnknownFamily("acrobat".into()));
    }

    #[test]
    fn builds_every_family_in_both_forms() {
        for f in FAMILIES {
            for form in [DynamicsForm::Forward, DynamicsForm::Inverse] {
                let mut spec = ProblemSpec::new(f).with_form(form);
                spec.horizon = 3;
                let p = build(&spec).unwrap();
                assert_eq!(p.horizon(), 3);
                assert_eq!(p.endpoint_dim(), 4);
                let inverse = spec.resolve().1 == DynamicsForm::Inverse;
                assert_eq!(p.stages[0].constraint_dim() > 0, inverse, "{f}");
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = ProblemSpec::new("lqr");
        s.dt = 0.0;
        assert!(matches!(build(&s), Err(Error::InvalidOption(_))));
        let mut s = ProblemSpec::new("dpend");
        s.masses = Some(vec![1.0, -1.0]);
        assert!(matches!(build(&s), Err(Error::InvalidOption(_))));
        let p = build(&ProblemSpec::new("lqr")).unwrap();
        assert!(matches!(duplicate_endpoint(&p, 1), Err(Error::InvalidOption(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let mut s = ProblemSpec::new("dpend-inverse");
        s.masses = Some(vec![1.0, 2.0]);
        s.duplicate_endpoint = 2;
        let text = toml::to_string(&s).unwrap();
        let back: ProblemSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn zero_magnitude_cold_start_is_constant() {
        let p = build(&ProblemSpec::new("cartpole")).unwrap();
        assert_eq!(cold_start(&p, 1, 0.0), p.constant_guess());
        assert_ne!(cold_start(&p, 1, 0.1), cold_start(&p, 2, 0.1));
    }
}
