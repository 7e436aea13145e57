//! Outer Newton loop: evaluate → linearize → direction → nonmonotone line
//! search on an ℓ1 merit → Levenberg–Marquardt scheduling → KKT test.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::direction::{compute_direction, DirectionOptions, EndpointFactorization, SearchDirection};
use crate::error::{Error, Result};
use crate::linalg::{default_rank_tol, BasisBackend, ColPivQr};
use crate::model::{evaluate, kkt_residual, linearize, HessianMode, Iterate, Problem, StageFunctions};
use crate::riccati::Formulation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    /// Re-integrate from the initial state; all dynamics gaps close.
    SingleShooting,
    /// Move states along the direction and contract gaps by `(1 − α)`.
    #[default]
    FeasibilityDriven,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub formulation: Formulation,
    pub endpoint: EndpointFactorization,
    /// Retry a singular Schur endpoint operator with `null-qr`.
    pub fallback: bool,
    pub stage_basis: BasisBackend,
    pub rank_tol: Option<f64>,
    pub hessian: HessianMode,
    pub rollout: RolloutMode,
    /// Project each rolled-out control onto `h(x, u) = 0` (min-norm in `u`).
    pub project_stagewise: bool,
    /// Step lengths tried in order.
    pub alphas: Vec<f64>,
    pub penalty_init: f64,
    /// ν ← max(ν, growth·‖λ⁺‖_∞).
    pub penalty_growth: f64,
    pub armijo: f64,
    pub window: usize,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_up: f64,
    pub reg_down: f64,
    /// Failures tolerated at `reg_max` before giving up.
    pub patience: usize,
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub merit_guard: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            formulation: Formulation::default(),
            endpoint: EndpointFactorization::Schur,
            fallback: true,
            stage_basis: BasisBackend::Qr,
            rank_tol: None,
            hessian: HessianMode::Exact,
            rollout: RolloutMode::FeasibilityDriven,
            project_stagewise: true,
            alphas: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
            penalty_init: 1.0,
            penalty_growth: 2.0,
            armijo: 1e-4,
            window: 5,
            reg_init: 1e-9,
            reg_min: 1e-9,
            reg_max: 1e9,
            reg_up: 10.0,
            reg_down: 0.5,
            patience: 3,
            tol_kkt: 1e-7,
            tol_feas: 1e-9,
            merit_guard: 1e12,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidOption(m.to_string()));
        let positive = [
            self.penalty_init,
            self.penalty_growth,
            self.armijo,
            self.reg_min,
            self.reg_max,
            self.tol_kkt,
            self.tol_feas,
            self.merit_guard,
        ];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("tolerances, penalties and regularization bounds must be positive");
        }
        if self.alphas.is_empty() || self.alphas[0] > 1.0 || self.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return bad("step-length ladder must be strictly decreasing within (0, 1]");
        }
        if self.alphas.iter().any(|&a| a <= 0.0) {
            return bad("step lengths must be positive");
        }
        if self.reg_min > self.reg_max || !(self.reg_init >= self.reg_min && self.reg_init <= self.reg_max) {
            return bad("reg_init must lie within [reg_min, reg_max]");
        }
        if !(self.reg_up > 1.0) || !(self.reg_down > 0.0 && self.reg_down < 1.0) {
            return bad("reg_up must exceed 1 and reg_down lie in (0, 1)");
        }
        if self.window == 0 || self.patience == 0 {
            return bad("window and patience must be at least 1");
        }
        Ok(())
    }

    pub fn direction_options(&self) -> DirectionOptions {
        DirectionOptions {
            formulation: self.formulation,
            endpoint: self.endpoint,
            fallback: self.fallback,
            rank_tol: self.rank_tol,
            stage_basis: self.stage_basis,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIters,
    LineSearchFailure,
    Diverged,
}

/// One outer iteration. Timings are wall-clock seconds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost of the iterate the step started from.
    pub cost: f64,
    pub merit: f64,
    pub endpoint_l1: f64,
    pub dyn_gap_l1: f64,
    pub stage_gap_l1: f64,
    pub kkt: f64,
    /// Accepted step length, 0 when the line search failed.
    pub alpha: f64,
    pub reg: f64,
    pub penalty: f64,
    /// Nonmonotone reference value (window max) used for acceptance.
    pub envelope: f64,
    pub predicted: f64,
    pub endpoint_route: EndpointFactorization,
    pub linearize_seconds: f64,
    pub direction_seconds: f64,
    pub line_search_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverStats {
    pub status: Status,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
    /// KKT residual at every visited iterate (`iterations + 1` entries when
    /// the loop ends on a convergence test).
    pub kkt_residuals: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_endpoint_l1: f64,
    pub final_infeasibility_l1: f64,
    pub total_seconds: f64,
}

/// `cost + ν·(‖f̄‖₁ + ‖h̄‖₁ + ‖r̄‖₁)`.
///
/// # Panics
/// If `nu` is not positive.
pub fn merit(it: &Iterate, nu: f64) -> f64 {
    assert!(nu > 0.0, "merit penalty must be positive, got {nu}");
    it.cost + nu * it.infeasibility_l1()
}

/// Penalty and the window of recently accepted `(cost, infeasibility)` pairs.
#[derive(Clone, Debug)]
pub struct MeritState {
    pub penalty: f64,
    window: VecDeque<(f64, f64)>,
    capacity: usize,
}

impl MeritState {
    pub fn new(first: &Iterate, opts: &SolverOptions) -> Self {
        let mut s = Self { penalty: opts.penalty_init, window: VecDeque::new(), capacity: opts.window };
        s.push(first);
        s
    }

    fn push(&mut self, it: &Iterate) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((it.cost, it.infeasibility_l1()));
    }

    /// Largest merit in the window at the current penalty.
    pub fn reference(&self) -> f64 {
        self.window.iter().map(|&(c, g)| c + self.penalty * g).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Candidate iterate for step length `α`.
pub fn rollout(problem: &Problem, it: &Iterate, dir: &SearchDirection, alpha: f64, mode: RolloutMode) -> Result<Iterate> {
    rollout_with(problem, it, dir, alpha, mode, false)
}

/// Minimum-norm correction of `u` onto `h(x, u) = 0`; a few Newton steps
/// (one suffices when `h` is affine in `u`).
fn project_control(stage: &dyn StageFunctions, x: &DVector<f64>, u: &mut DVector<f64>) {
    for _ in 0..3 {
        let h = stage.constraint(x, u);
        if h.amax() <= 1e-14 * (1.0 + u.amax()) {
            return;
        }
        let (_, hu) = stage.constraint_jacobians(x, u);
        let qr = ColPivQr::new(&hu.transpose(), default_rank_tol(hu.ncols(), hu.nrows()));
        let d = qr.solve_transpose_min_norm(&DMatrix::from_column_slice(h.len(), 1, h.as_slice()));
        *u -= d.column(0);
    }
}

/// [`rollout`], optionally projecting controls onto the stagewise constraints.
pub fn rollout_with(
    problem: &Problem,
    it: &Iterate,
    dir: &SearchDirection,
    alpha: f64,
    mode: RolloutMode,
    project: bool,
) -> Result<Iterate> {
    let n = problem.horizon();
    let step = &dir.step;
    let mut xs = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n);
    xs.push(match mode {
        RolloutMode::SingleShooting => problem.initial_state.clone(),
        RolloutMode::FeasibilityDriven => &it.xs[0] + alpha * &step.dx[0],
    });
    for k in 0..n {
        let x = &xs[k];
        let dev = problem.state_diff.diff(x, &it.xs[k]) - alpha * &step.dx[k];
        let mut u = &it.us[k] + alpha * &step.du[k] - &dir.feedback[k] * dev;
        if project && problem.stages[k].constraint_dim() > 0 && u.iter().all(|v| v.is_finite()) {
            project_control(problem.stages[k].as_ref(), x, &mut u);
        }
        let mut next = problem.stages[k].dynamics(x, &u);
        if mode == RolloutMode::FeasibilityDriven {
            next -= (1.0 - alpha) * &it.dyn_gaps[k + 1];
        }
        if next.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { stage: k + 1 });
        }
        us.push(u);
        xs.push(next);
    }
    let mut cand = evaluate(problem, &xs, &us).map_err(|e| match e {
        Error::CallbackFailure { stage, .. } => Error::NonFiniteState { stage },
        e => e,
    })?;
    let blend = |old: &[DVector<f64>], new: &[DVector<f64>]| -> Vec<DVector<f64>> {
        old.iter().zip(new).map(|(o, p)| o + alpha * (p - o)).collect()
    };
    cand.dyn_multipliers = blend(&it.dyn_multipliers, &step.dyn_multipliers);
    cand.stage_multipliers = blend(&it.stage_multipliers, &step.stage_multipliers);
    cand.endpoint_multiplier = &it.endpoint_multiplier + alpha * (&step.endpoint_multiplier - &it.endpoint_multiplier);
    Ok(cand)
}

#[derive(Clone, Debug)]
pub struct LineSearchOutcome {
    pub iterate: Iterate,
    pub alpha: f64,
    pub penalty: f64,
    pub envelope: f64,
    pub predicted: f64,
}

/// Post-step multiplier size `‖(ξ⁺, γ⁺, β⁺)‖_∞`.
fn step_multiplier_max(dir: &SearchDirection) -> f64 {
    let s = &dir.step;
    let a = s.dyn_multipliers.iter().chain(&s.stage_multipliers).map(|v| v.amax()).fold(0.0, f64::max);
    a.max(s.endpoint_multiplier.amax())
}

/// Try the step-length ladder; accept on the nonmonotone Armijo test
/// `merit(cand) ≤ max(window) + η·(m(α) − αν‖c‖₁)`.
pub fn line_search(
    problem: &Problem,
    it: &Iterate,
    dir: &SearchDirection,
    opts: &SolverOptions,
    state: &mut MeritState,
) -> Result<LineSearchOutcome> {
    state.penalty = state.penalty.max(opts.penalty_growth * step_multiplier_max(dir));
    let nu = state.penalty;
    let reference = state.reference();
    let infeas = it.infeasibility_l1();
    for &alpha in &opts.alphas {
        let predicted = dir.model.change(alpha) - alpha * nu * infeas;
        if !(predicted < 0.0) {
            // No descent predicted; shorter steps cannot help either.
            break;
        }
        let cand = match rollout_with(problem, it, dir, alpha, opts.rollout, opts.project_stagewise) {
            Ok(c) => c,
            Err(Error::NonFiniteState { .. }) => continue,
            Err(e) => return Err(e),
        };
        // Allow for rounding in the merit itself near convergence.
        let slack = 1e-13 * (1.0 + reference.abs());
        if merit(&cand, nu) <= reference + opts.armijo * predicted + slack {
            state.push(&cand);
            return Ok(LineSearchOutcome { iterate: cand, alpha, penalty: nu, envelope: reference, predicted });
        }
    }
    Err(Error::LineSearchFailure)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegOutcome {
    NotPositiveDefinite,
    LineSearchFailure,
    FullStep,
    PartialStep,
}

/// Levenberg–Marquardt schedule, clamped to `[reg_min, reg_max]`.
pub fn update_regularization(reg: f64, outcome: RegOutcome, opts: &SolverOptions) -> f64 {
    let r = match outcome {
        RegOutcome::NotPositiveDefinite | RegOutcome::LineSearchFailure => reg * opts.reg_up,
        RegOutcome::FullStep => reg * opts.reg_down,
        RegOutcome::PartialStep => reg,
    };
    r.clamp(opts.reg_min, opts.reg_max)
}

/// Solve from the guess `(xs, us)`. Returns the final iterate (with
/// multipliers) and per-iteration statistics.
pub fn solve(problem: &Problem, xs: &[DVector<f64>], us: &[DVector<f64>], opts: &SolverOptions) -> Result<(Iterate, SolverStats)> {
    opts.validate()?;
    let start = Instant::now();
    let dopts = opts.direction_options();
    let mut it = evaluate(problem, xs, us)?;
    let mut state = MeritState::new(&it, opts);
    let initial_cost = it.cost;
    let mut reg = opts.reg_init;
    let mut saturated = 0usize;
    let mut records = Vec::new();
    let mut kkt_residuals = Vec::new();
    let mut status = Status::MaxIters;

    for iteration in 0..=opts.max_iters {
        let t = Instant::now();
        let lq = linearize(problem, &it, opts.hessian)?;
        let linearize_seconds = t.elapsed().as_secs_f64();
        let kkt = kkt_residual(&lq, &it).norm();
        kkt_residuals.push(kkt);
        if kkt <= opts.tol_kkt && it.endpoint_gap_l1() <= opts.tol_feas {
            status = Status::Converged;
            break;
        }
        if iteration == opts.max_iters {
            break;
        }
        if merit(&it, state.penalty) > opts.merit_guard {
            status = Status::Diverged;
            break;
        }

        let dir = loop {
            match compute_direction(&lq, reg, &dopts) {
                Ok(d) => break Some(d),
                Err(Error::NotPositiveDefinite { .. }) => {
                    if reg >= opts.reg_max {
                        break None;
                    }
                    reg = update_regularization(reg, RegOutcome::NotPositiveDefinite, opts);
                }
                Err(e) => return Err(e),
            }
        };
        let Some(dir) = dir else {
            status = Status::Diverged;
            break;
        };

        let t = Instant::now();
        let outcome = line_search(problem, &it, &dir, opts, &mut state);
        let line_search_seconds = t.elapsed().as_secs_f64();
        let mut record = IterationRecord {
            iteration,
            cost: it.cost,
            merit: merit(&it, state.penalty),
            endpoint_l1: it.endpoint_gap_l1(),
            dyn_gap_l1: it.dyn_gap_l1(),
            stage_gap_l1: it.stage_gap_l1(),
            kkt,
            alpha: 0.0,
            reg,
            penalty: state.penalty,
            envelope: state.reference(),
            predicted: 0.0,
            endpoint_route: dir.endpoint_route,
            linearize_seconds,
            direction_seconds: dir.seconds,
            line_search_seconds,
        };
        match outcome {
            Ok(ls) => {
                record.alpha = ls.alpha;
                record.envelope = ls.envelope;
                record.predicted = ls.predicted;
                let full = ls.alpha == opts.alphas[0];
                reg = update_regularization(reg, if full { RegOutcome::FullStep } else { RegOutcome::PartialStep }, opts);
                saturated = 0;
                it = ls.iterate;
                records.push(record);
            }
            Err(Error::LineSearchFailure) => {
                records.push(record);
                if reg >= opts.reg_max {
                    saturated += 1;
                    if saturated >= opts.patience {
                        status = Status::LineSearchFailure;
                        break;
                    }
                }
                reg = update_regularization(reg, RegOutcome::LineSearchFailure, opts);
            }
            Err(e) => return Err(e),
        }
    }

    let stats = SolverStats {
        status,
        iterations: records.len(),
        records,
        kkt_residuals,
        initial_cost,
        final_cost: it.cost,
        final_endpoint_l1: it.endpoint_gap_l1(),
        final_infeasibility_l1: it.infeasibility_l1(),
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((it, stats))
}
