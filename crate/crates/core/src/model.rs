//! Optimal-control problem description, iterates, linearization and the
//! dense KKT assembly used by the oracle.
//!
//! Dense variable order: `[ξ₀, δx₀, δu₀, γ₀, ξ₁, δx₁, δu₁, γ₁, …, ξ_N, δx_N]`.
//! Rows of the dense system follow the same order; the endpoint row is `B`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saddle::SaddleSystem;

#[derive(Clone, Debug)]
pub struct CostDerivatives {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub lxu: DMatrix<f64>,
    pub luu: DMatrix<f64>,
}

/// Second-order blocks of a multiplier-weighted vector function `Σ λᵢ ∇²gᵢ`.
#[derive(Clone, Debug)]
pub struct Curvature {
    pub xx: DMatrix<f64>,
    pub xu: DMatrix<f64>,
    pub uu: DMatrix<f64>,
}

/// Cost, dynamics and optional stagewise equality constraint of one stage.
pub trait StageFunctions: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn constraint_dim(&self) -> usize {
        0
    }

    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives;

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
    /// `Σ λᵢ ∇²fᵢ`; `None` if the model does not supply second derivatives.
    fn dynamics_curvature(&self, _x: &DVector<f64>, _u: &DVector<f64>, _lambda: &DVector<f64>) -> Option<Curvature> {
        None
    }

    fn constraint(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn constraint_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::zeros(0, self.state_dim()), DMatrix::zeros(0, self.control_dim()))
    }
    fn constraint_curvature(&self, _x: &DVector<f64>, _u: &DVector<f64>, _lambda: &DVector<f64>) -> Option<Curvature> {
        None
    }
}

pub trait TerminalCost: Send + Sync {
    fn cost(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Endpoint constraint `r(x_N) = 0`; `dim() == 0` means no endpoint constraint.
pub trait EndpointConstraint: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `Σ βᵢ ∇²rᵢ`.
    fn curvature(&self, _x: &DVector<f64>, _beta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// The difference operator `a ⊖ b`; its Jacobian is taken to be the identity.
pub trait StateDifference: Send + Sync {
    fn diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Euclidean;

impl StateDifference for Euclidean {
    fn diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        a - b
    }
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Euclidean difference with the listed coordinates wrapped into (−π, π].
#[derive(Clone, Debug, Default)]
pub struct WrappedAngles {
    pub indices: Vec<usize>,
}

impl StateDifference for WrappedAngles {
    fn diff(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        for &i in &self.indices {
            d[i] = wrap_angle(d[i]);
        }
        d
    }
}

/// No endpoint constraint.
#[derive(Clone, Copy, Debug)]
pub struct FreeEndpoint {
    pub state_dim: usize,
}

impl EndpointConstraint for FreeEndpoint {
    fn dim(&self) -> usize {
        0
    }
    fn value(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, self.state_dim)
    }
}

#[derive(Clone)]
pub struct Problem {
    pub initial_state: DVector<f64>,
    pub stages: Vec<Arc<dyn StageFunctions>>,
    pub terminal_cost: Arc<dyn TerminalCost>,
    pub endpoint: Arc<dyn EndpointConstraint>,
    pub state_diff: Arc<dyn StateDifference>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("horizon", &self.horizon())
            .field("state_dim", &self.state_dim())
            .field("endpoint_dim", &self.endpoint_dim())
            .finish()
    }
}

impl Problem {
    pub fn new(
        initial_state: DVector<f64>,
        stages: Vec<Arc<dyn StageFunctions>>,
        terminal_cost: Arc<dyn TerminalCost>,
        endpoint: Arc<dyn EndpointConstraint>,
    ) -> Result<Self> {
        let p = Self { initial_state, stages, terminal_cost, endpoint, state_diff: Arc::new(Euclidean) };
        p.validate()?;
        Ok(p)
    }

    pub fn with_state_diff(mut self, diff: Arc<dyn StateDifference>) -> Self {
        self.state_diff = diff;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::DimensionMismatch("horizon must be at least 1".into()));
        }
        let nx = self.initial_state.len();
        for (k, s) in self.stages.iter().enumerate() {
            if s.state_dim() != nx {
                return Err(Error::DimensionMismatch(format!("stage {k} state dim {} != {nx}", s.state_dim())));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn endpoint_dim(&self) -> usize {
        self.endpoint.dim()
    }

    pub fn control_dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.control_dim()).collect()
    }

    /// States pinned at the initial state and zero controls.
    pub fn constant_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let xs = vec![self.initial_state.clone(); self.horizon() + 1];
        let us = self.stages.iter().map(|s| DVector::zeros(s.control_dim())).collect();
        (xs, us)
    }

    /// Open-loop integration of the given controls from the initial state.
    pub fn simulate(&self, us: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(self.initial_state.clone());
        for (s, u) in self.stages.iter().zip(us) {
            let next = s.dynamics(xs.last().unwrap(), u);
            xs.push(next);
        }
        xs
    }
}

/// Trajectory, gaps and (full, not incremental) multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    /// `f̄₀ = x̃₀ ⊖ x₀`, `f̄_{k+1} = f(x_k, u_k) ⊖ x_{k+1}`.
    pub dyn_gaps: Vec<DVector<f64>>,
    pub stage_gaps: Vec<DVector<f64>>,
    pub endpoint_gap: DVector<f64>,
    /// ξ₀ … ξ_N.
    pub dyn_multipliers: Vec<DVector<f64>>,
    /// γ₀ … γ_{N−1}.
    pub stage_multipliers: Vec<DVector<f64>>,
    /// β.
    pub endpoint_multiplier: DVector<f64>,
    pub cost: f64,
}

fn check_finite_vec(v: &DVector<f64>, stage: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::CallbackFailure { stage, what: format!("non-finite {what}") })
    }
}

fn check_finite_mat(m: &DMatrix<f64>, stage: usize, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::CallbackFailure { stage, what: format!("non-finite {what}") })
    }
}

/// Evaluate gaps and cost at `(xs, us)` with zero multipliers.
pub fn evaluate(problem: &Problem, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<Iterate> {
    let n = problem.horizon();
    let nx = problem.state_dim();
    if xs.len() != n + 1 || us.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected {} states and {n} controls, got {} and {}",
            n + 1,
            xs.len(),
            us.len()
        )));
    }
    for (k, x) in xs.iter().enumerate() {
        if x.len() != nx {
            return Err(Error::DimensionMismatch(format!("state {k} has length {}", x.len())));
        }
    }
    for (k, (u, s)) in us.iter().zip(&problem.stages).enumerate() {
        if u.len() != s.control_dim() {
            return Err(Error::DimensionMismatch(format!("control {k} has length {}", u.len())));
        }
    }
    let per_stage: Vec<(DVector<f64>, DVector<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let s = &problem.stages[k];
            let next = s.dynamics(&xs[k], &us[k]);
            check_finite_vec(&next, k, "dynamics")?;
            let h = s.constraint(&xs[k], &us[k]);
            check_finite_vec(&h, k, "constraint")?;
            if h.len() != s.constraint_dim() {
                return Err(Error::DimensionMismatch(format!("stage {k} constraint length {}", h.len())));
            }
            let c = s.cost(&xs[k], &us[k]);
            if !c.is_finite() {
                return Err(Error::CallbackFailure { stage: k, what: "non-finite cost".into() });
            }
            Ok((problem.state_diff.diff(&next, &xs[k + 1]), h, c))
        })
        .collect::<Result<_>>()?;

    let mut dyn_gaps = Vec::with_capacity(n + 1);
    dyn_gaps.push(problem.state_diff.diff(&problem.initial_state, &xs[0]));
    let mut stage_gaps = Vec::with_capacity(n);
    let mut cost = 0.0;
    for (gap, h, c) in per_stage {
        dyn_gaps.push(gap);
        stage_gaps.push(h);
        cost += c;
    }
    let terminal = problem.terminal_cost.cost(&xs[n]);
    let endpoint_gap = problem.endpoint.value(&xs[n]);
    if !terminal.is_finite() {
        return Err(Error::CallbackFailure { stage: n, what: "non-finite terminal cost".into() });
    }
    check_finite_vec(&endpoint_gap, n, "endpoint")?;
    cost += terminal;

    Ok(Iterate {
        xs: xs.to_vec(),
        us: us.to_vec(),
        dyn_multipliers: vec![DVector::zeros(nx); n + 1],
        stage_multipliers: stage_gaps.iter().map(|h| DVector::zeros(h.len())).collect(),
        endpoint_multiplier: DVector::zeros(endpoint_gap.len()),
        dyn_gaps,
        stage_gaps,
        endpoint_gap,
        cost,
    })
}

impl Iterate {
    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    /// Copy the multipliers of `other` (same problem).
    pub fn carry_multipliers(&mut self, other: &Iterate) {
        self.dyn_multipliers = other.dyn_multipliers.clone();
        self.stage_multipliers = other.stage_multipliers.clone();
        self.endpoint_multiplier = other.endpoint_multiplier.clone();
    }

    pub fn dyn_gap_l1(&self) -> f64 {
        self.dyn_gaps.iter().map(|g| g.lp_norm(1)).sum()
    }

    pub fn stage_gap_l1(&self) -> f64 {
        self.stage_gaps.iter().map(|g| g.lp_norm(1)).sum()
    }

    pub fn endpoint_gap_l1(&self) -> f64 {
        self.endpoint_gap.lp_norm(1)
    }

    pub fn infeasibility_l1(&self) -> f64 {
        self.dyn_gap_l1() + self.stage_gap_l1() + self.endpoint_gap_l1()
    }

    /// ∞-norm over all multipliers.
    pub fn multiplier_max(&self) -> f64 {
        let a = self.dyn_multipliers.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let b = self.stage_multipliers.iter().map(|v| v.amax()).fold(0.0, f64::max);
        a.max(b).max(self.endpoint_multiplier.amax())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// Drop second derivatives of dynamics and constraints.
    #[default]
    GaussNewton,
    /// Contract second derivatives with the iterate's stored multipliers.
    Exact,
}

#[derive(Clone, Debug)]
pub struct StageLq {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub lxu: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    pub hx: DMatrix<f64>,
    pub hu: DMatrix<f64>,
    /// Gap of the dynamics into the next stage, `f̄_{k+1}`.
    pub dyn_gap: DVector<f64>,
    /// `h̄_k`.
    pub stage_gap: DVector<f64>,
}

impl StageLq {
    pub fn state_dim(&self) -> usize {
        self.fx.ncols()
    }
    pub fn control_dim(&self) -> usize {
        self.fu.ncols()
    }
    pub fn constraint_dim(&self) -> usize {
        self.hu.nrows()
    }
}

/// Linear-quadratic model of the problem around an iterate.
#[derive(Clone, Debug)]
pub struct LqApproximation {
    pub stages: Vec<StageLq>,
    /// `f̄₀`.
    pub initial_gap: DVector<f64>,
    pub terminal_gradient: DVector<f64>,
    pub terminal_hessian: DMatrix<f64>,
    pub endpoint_jacobian: DMatrix<f64>,
    pub endpoint_gap: DVector<f64>,
}

impl LqApproximation {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }
    pub fn state_dim(&self) -> usize {
        self.initial_gap.len()
    }
    pub fn endpoint_dim(&self) -> usize {
        self.endpoint_gap.len()
    }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn linearize(problem: &Problem, it: &Iterate, mode: HessianMode) -> Result<LqApproximation> {
    let n = problem.horizon();
    let stages: Vec<StageLq> = (0..n)
        .into_par_iter()
        .map(|k| {
            let s = &problem.stages[k];
            let (x, u) = (&it.xs[k], &it.us[k]);
            let c = s.cost_derivatives(x, u);
            let (fx, fu) = s.dynamics_jacobians(x, u);
            let (hx, hu) = s.constraint_jacobians(x, u);
            let (mut lxx, mut lxu, mut luu) = (c.lxx, c.lxu, c.luu);
            if mode == HessianMode::Exact {
                if let Some(cv) = s.dynamics_curvature(x, u, &it.dyn_multipliers[k + 1]) {
                    lxx += cv.xx;
                    lxu += cv.xu;
                    luu += cv.uu;
                }
                if s.constraint_dim() > 0 {
                    if let Some(cv) = s.constraint_curvature(x, u, &it.stage_multipliers[k]) {
                        lxx += cv.xx;
                        lxu += cv.xu;
                        luu += cv.uu;
                    }
                }
            }
            for (m, name) in [(&fx, "f_x"), (&fu, "f_u"), (&hx, "h_x"), (&hu, "h_u"), (&lxx, "l_xx"), (&luu, "l_uu")] {
                check_finite_mat(m, k, name)?;
            }
            check_finite_vec(&c.lx, k, "l_x")?;
            check_finite_vec(&c.lu, k, "l_u")?;
            Ok(StageLq {
                lx: c.lx,
                lu: c.lu,
                lxx: sym(lxx),
                lxu,
                luu: sym(luu),
                fx,
                fu,
                hx,
                hu,
                dyn_gap: it.dyn_gaps[k + 1].clone(),
                stage_gap: it.stage_gaps[k].clone(),
            })
        })
        .collect::<Result<_>>()?;
    let xn = &it.xs[n];
    let mut terminal_hessian = problem.terminal_cost.hessian(xn);
    if mode == HessianMode::Exact && problem.endpoint_dim() > 0 {
        if let Some(c) = problem.endpoint.curvature(xn, &it.endpoint_multiplier) {
            terminal_hessian += c;
        }
    }
    let lq = LqApproximation {
        stages,
        initial_gap: it.dyn_gaps[0].clone(),
        terminal_gradient: problem.terminal_cost.gradient(xn),
        terminal_hessian: sym(terminal_hessian),
        endpoint_jacobian: problem.endpoint.jacobian(xn),
        endpoint_gap: it.endpoint_gap.clone(),
    };
    check_finite_vec(&lq.terminal_gradient, n, "terminal gradient")?;
    check_finite_mat(&lq.endpoint_jacobian, n, "endpoint jacobian")?;
    Ok(lq)
}

/// Offsets of each block in the dense variable vector.
#[derive(Clone, Debug)]
pub struct KktLayout {
    pub xi: Vec<usize>,
    pub dx: Vec<usize>,
    pub du: Vec<usize>,
    pub gamma: Vec<usize>,
    pub dim: usize,
}

impl KktLayout {
    pub fn new(lq: &LqApproximation) -> Self {
        let nx = lq.state_dim();
        let (mut xi, mut dx, mut du, mut gamma) = (vec![], vec![], vec![], vec![]);
        let mut at = 0;
        for s in &lq.stages {
            xi.push(at);
            at += nx;
            dx.push(at);
            at += nx;
            du.push(at);
            at += s.control_dim();
            gamma.push(at);
            at += s.constraint_dim();
        }
        xi.push(at);
        at += nx;
        dx.push(at);
        at += nx;
        Self { xi, dx, du, gamma, dim: at }
    }
}

fn put(a: &mut DMatrix<f64>, r: usize, c: usize, m: &DMatrix<f64>) {
    a.view_mut((r, c), m.shape()).copy_from(m);
    a.view_mut((c, r), (m.ncols(), m.nrows())).copy_from(&m.transpose());
}

fn put_vec(v: &mut DVector<f64>, at: usize, x: &DVector<f64>) {
    v.rows_mut(at, x.len()).copy_from(x);
}

/// Dense KKT system of the LQ subproblem.
pub fn assemble_dense_kkt(lq: &LqApproximation) -> (SaddleSystem, KktLayout) {
    let layout = KktLayout::new(lq);
    let nx = lq.state_dim();
    let n = lq.horizon();
    let dim = layout.dim;
    let mut a = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let eye = DMatrix::<f64>::identity(nx, nx);
    put(&mut a, layout.xi[0], layout.dx[0], &(-&eye));
    put_vec(&mut rhs, layout.xi[0], &(-&lq.initial_gap));
    for (k, s) in lq.stages.iter().enumerate() {
        let (x, u, g) = (layout.dx[k], layout.du[k], layout.gamma[k]);
        put(&mut a, x, x, &s.lxx);
        put(&mut a, x, u, &s.lxu);
        put(&mut a, u, u, &s.luu);
        put(&mut a, g, x, &s.hx);
        put(&mut a, g, u, &s.hu);
        let xi = layout.xi[k + 1];
        put(&mut a, xi, x, &s.fx);
        put(&mut a, xi, u, &s.fu);
        put(&mut a, xi, layout.dx[k + 1], &(-&eye));
        put_vec(&mut rhs, x, &(-&s.lx));
        put_vec(&mut rhs, u, &(-&s.lu));
        put_vec(&mut rhs, g, &(-&s.stage_gap));
        put_vec(&mut rhs, xi, &(-&s.dyn_gap));
    }
    put(&mut a, layout.dx[n], layout.dx[n], &lq.terminal_hessian);
    put_vec(&mut rhs, layout.dx[n], &(-&lq.terminal_gradient));
    let nr = lq.endpoint_dim();
    let mut b = DMatrix::zeros(nr, dim);
    b.view_mut((0, layout.dx[n]), (nr, nx)).copy_from(&lq.endpoint_jacobian);
    let sys = SaddleSystem { matrix: a, rhs, constraints: b, constraint_rhs: -&lq.endpoint_gap };
    (sys, layout)
}

/// Primal/dual step in trajectory form.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub dx: Vec<DVector<f64>>,
    pub du: Vec<DVector<f64>>,
    /// Full multipliers after the step.
    pub dyn_multipliers: Vec<DVector<f64>>,
    pub stage_multipliers: Vec<DVector<f64>>,
    pub endpoint_multiplier: DVector<f64>,
}

impl Step {
    /// Pack into the dense variable vector and endpoint multiplier.
    pub fn pack(&self, layout: &KktLayout) -> (DVector<f64>, DVector<f64>) {
        let mut w = DVector::zeros(layout.dim);
        for (k, v) in self.dx.iter().enumerate() {
            put_vec(&mut w, layout.dx[k], v);
        }
        for (k, v) in self.du.iter().enumerate() {
            put_vec(&mut w, layout.du[k], v);
        }
        for (k, v) in self.dyn_multipliers.iter().enumerate() {
            put_vec(&mut w, layout.xi[k], v);
        }
        for (k, v) in self.stage_multipliers.iter().enumerate() {
            put_vec(&mut w, layout.gamma[k], v);
        }
        (w, self.endpoint_multiplier.clone())
    }

    /// Inverse of [`Step::pack`].
    pub fn unpack(lq: &LqApproximation, layout: &KktLayout, w: &DVector<f64>, y: &DVector<f64>) -> Self {
        let nx = lq.state_dim();
        let n = lq.horizon();
        let get = |at: usize, len: usize| w.rows(at, len).clone_owned();
        Self {
            dx: (0..=n).map(|k| get(layout.dx[k], nx)).collect(),
            du: lq.stages.iter().enumerate().map(|(k, s)| get(layout.du[k], s.control_dim())).collect(),
            dyn_multipliers: (0..=n).map(|k| get(layout.xi[k], nx)).collect(),
            stage_multipliers: lq.stages.iter().enumerate().map(|(k, s)| get(layout.gamma[k], s.constraint_dim())).collect(),
            endpoint_multiplier: y.clone(),
        }
    }
}

/// Stationarity and feasibility residuals (∞-norms) of the nonlinear KKT
/// conditions at an iterate, using its stored multipliers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub feasibility: f64,
}

impl KktResidual {
    pub fn norm(&self) -> f64 {
        self.stationarity.max(self.feasibility)
    }
}

pub fn kkt_residual(lq: &LqApproximation, it: &Iterate) -> KktResidual {
    let n = lq.horizon();
    let mut stat = 0.0_f64;
    for (k, s) in lq.stages.iter().enumerate() {
        let xi_next = &it.dyn_multipliers[k + 1];
        let gamma = &it.stage_multipliers[k];
        let rx = &s.lx + s.fx.tr_mul(xi_next) - &it.dyn_multipliers[k] + s.hx.tr_mul(gamma);
        let ru = &s.lu + s.fu.tr_mul(xi_next) + s.hu.tr_mul(gamma);
        stat = stat.max(rx.amax()).max(ru.amax());
    }
    let rn = &lq.terminal_gradient - &it.dyn_multipliers[n] + lq.endpoint_jacobian.tr_mul(&it.endpoint_multiplier);
    stat = stat.max(rn.amax());
    let mut feas = lq.initial_gap.amax().max(lq.endpoint_gap.amax());
    for s in &lq.stages {
        feas = feas.max(s.dyn_gap.amax()).max(s.stage_gap.amax());
    }
    KktResidual { stationarity: stat, feasibility: feas }
}

/// Largest finite-difference mismatch found by [`check_derivatives`].
#[derive(Clone, Debug, Default)]
pub struct DerivativeReport {
    pub max_rel_error: f64,
    pub worst: String,
}

impl DerivativeReport {
    fn record(&mut self, analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, label: String) {
        let err = crate::linalg::max_abs(&(analytic - numeric));
        let rel = err / crate::linalg::max_abs(analytic).max(1.0);
        if rel >= self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = label;
        }
    }
}

fn fd_jacobian(g: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let h = 1e-6 * (1.0 + x.norm());
    let m = g(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        j.set_column(i, &((g(&xp) - g(&xm)) / (2.0 * h)));
    }
    j
}

/// Compare all first derivatives against central differences with step
/// `1e−6·(1+‖·‖)`. Errors are relative to `max(‖J‖_max, 1)`.
pub fn check_derivatives(problem: &Problem, xs: &[DVector<f64>], us: &[DVector<f64>]) -> DerivativeReport {
    let mut report = DerivativeReport::default();
    let as_row = |v: DVector<f64>| DMatrix::from_row_slice(1, v.len(), v.as_slice());
    for (k, s) in problem.stages.iter().enumerate() {
        let (x, u) = (&xs[k], &us[k]);
        let (fx, fu) = s.dynamics_jacobians(x, u);
        report.record(&fx, &fd_jacobian(|z| s.dynamics(z, u), x), format!("f_x[{k}]"));
        report.record(&fu, &fd_jacobian(|z| s.dynamics(x, z), u), format!("f_u[{k}]"));
        if s.constraint_dim() > 0 {
            let (hx, hu) = s.constraint_jacobians(x, u);
            report.record(&hx, &fd_jacobian(|z| s.constraint(z, u), x), format!("h_x[{k}]"));
            report.record(&hu, &fd_jacobian(|z| s.constraint(x, z), u), format!("h_u[{k}]"));
        }
        let c = s.cost_derivatives(x, u);
        let one = |v: f64| DVector::from_element(1, v);
        report.record(&as_row(c.lx), &fd_jacobian(|z| one(s.cost(z, u)), x), format!("l_x[{k}]"));
        report.record(&as_row(c.lu), &fd_jacobian(|z| one(s.cost(x, z)), u), format!("l_u[{k}]"));
    }
    let xn = &xs[problem.horizon()];
    let tc = &problem.terminal_cost;
    report.record(
        &as_row(tc.gradient(xn)),
        &fd_jacobian(|z| DVector::from_element(1, tc.cost(z)), xn),
        "l_xN".into(),
    );
    if problem.endpoint_dim() > 0 {
        report.record(&problem.endpoint.jacobian(xn), &fd_jacobian(|z| problem.endpoint.value(z), xn), "r_x".into());
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    struct Scalar;
    impl StageFunctions for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            0.5 * (x[0] * x[0] + u[0] * u[0])
        }
        fn cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
            CostDerivatives {
                lx: x.clone(),
                lu: u.clone(),
                lxx: dmatrix![1.0],
                lxu: dmatrix![0.0],
                luu: dmatrix![1.0],
            }
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            x + u
        }
        fn dynamics_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            (dmatrix![1.0], dmatrix![1.0])
        }
    }

    struct Half;
    impl TerminalCost for Half {
        fn cost(&self, x: &DVector<f64>) -> f64 {
            0.5 * x[0] * x[0]
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            dmatrix![1.0]
        }
    }

    struct Shift(f64);
    impl EndpointConstraint for Shift {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &DVector<f64>) -> DVector<f64> {
            dvector![x[0] - self.0]
        }
        fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            dmatrix![1.0]
        }
    }

    fn scalar_problem(x0: f64) -> Problem {
        Problem::new(dvector![x0], vec![Arc::new(Scalar)], Arc::new(Half), Arc::new(Shift(1.0))).unwrap()
    }

    #[test]
    fn single_stage_gap() {
        let p = scalar_problem(0.0);
        let it = evaluate(&p, &[dvector![0.0], dvector![0.5]], &[dvector![1.0]]).unwrap();
        assert_eq!(it.dyn_gaps[1][0], 0.5);
        assert_eq!(it.dyn_gaps[0][0], 0.0);
        assert_eq!(it.endpoint_gap[0], -0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let p = scalar_problem(0.0);
        assert!(matches!(evaluate(&p, &[dvector![0.0]], &[dvector![1.0]]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn smallest_kkt_pattern() {
        let p = scalar_problem(0.0);
        let it = evaluate(&p, &[dvector![0.0], dvector![0.0]], &[dvector![0.0]]).unwrap();
        let lq = linearize(&p, &it, HessianMode::GaussNewton).unwrap();
        let (sys, layout) = assemble_dense_kkt(&lq);
        assert_eq!(layout.dim, 5);
        #[rustfmt::skip]
        let expected = dmatrix![
             0.0, -1.0, 0.0,  0.0, 0.0;
            -1.0,  1.0, 0.0,  1.0, 0.0;
             0.0,  0.0, 1.0,  1.0, 0.0;
             0.0,  1.0, 1.0,  0.0, -1.0;
             0.0,  0.0, 0.0, -1.0, 1.0
        ];
        assert_eq!(sys.matrix, expected);
        assert_eq!(sys.constraints, dmatrix![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(sys.constraint_rhs, dvector![1.0]);
    }

    #[test]
    fn wrap_is_half_open() {
        use std::f64::consts::PI;
        assert!((wrap_angle(PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        let d = WrappedAngles { indices: vec![0] }.diff(&dvector![PI - 0.1, 1.0], &dvector![-PI + 0.1, 0.0]);
        assert!((d[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn derivative_check_on_scalar() {
        let p = scalar_problem(0.3);
        let r = check_derivatives(&p, &[dvector![0.3], dvector![0.7]], &[dvector![0.2]]);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
