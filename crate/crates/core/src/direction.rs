//! Endpoint multiplier, combination of the two sweeps, and the quadratic
//! model of the step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{default_rank_tol, nullspace_bases_with, BasisBackend, CholeskyFactor, GRAM_PIVOT_TOL};
use crate::model::{LqApproximation, Step};
use crate::riccati::{
    backward_pass_check, backward_pass_hat, rollout_check, rollout_hat, CheckDirection, CheckValueModel, Formulation,
    HatDirection, HatValueModel, SweepOptions,
};
use crate::saddle::CONSISTENCY_TOL;

/// How the endpoint multiplier is recovered (names follow the CLI).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndpointFactorization {
    #[default]
    Schur,
    NullLu,
    NullQr,
}

impl EndpointFactorization {
    pub const ALL: [EndpointFactorization; 3] = [Self::Schur, Self::NullLu, Self::NullQr];

    pub fn name(self) -> &'static str {
        match self {
            Self::Schur => "schur",
            Self::NullLu => "null-lu",
            Self::NullQr => "null-qr",
        }
    }

    fn backend(self) -> BasisBackend {
        match self {
            Self::NullLu => BasisBackend::Lu,
            _ => BasisBackend::Qr,
        }
    }
}

impl std::str::FromStr for EndpointFactorization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidOption(format!("unknown factorization `{s}`")))
    }
}

/// Residual `ρ = r̄ + r_x δx̂_N` and operator `S = r_x δX_N`.
fn endpoint_system(
    rx: &DMatrix<f64>,
    rbar: &DVector<f64>,
    dx_hat_n: &DVector<f64>,
    dx_check_n: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    (rbar + rx * dx_hat_n, rx * dx_check_n)
}

/// `β = (r_x δX_N)⁻¹ (r̄ + r_x δx̂_N)`.
pub fn endpoint_multiplier_schur(
    rx: &DMatrix<f64>,
    rbar: &DVector<f64>,
    dx_hat_n: &DVector<f64>,
    dx_check_n: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let (rho, s) = endpoint_system(rx, rbar, dx_hat_n, dx_check_n);
    let chol = CholeskyFactor::new_gram(&s, GRAM_PIVOT_TOL).ok_or(Error::SingularEndpointOperator)?;
    Ok(chol.solve_vec(&rho))
}

/// `β = Y_c (Y_cᵀ S Y_c)⁻¹ Y_cᵀ ρ` with `Y_c` spanning the range of `S = r_x δX_N`.
pub fn endpoint_multiplier_nullspace(
    rx: &DMatrix<f64>,
    rbar: &DVector<f64>,
    dx_hat_n: &DVector<f64>,
    dx_check_n: &DMatrix<f64>,
    rank_tol: f64,
    backend: BasisBackend,
) -> Result<DVector<f64>> {
    let (rho, s) = endpoint_system(rx, rbar, dx_hat_n, dx_check_n);
    if rho.is_empty() {
        return Ok(rho);
    }
    let bases = nullspace_bases_with(&s, rank_tol, backend);
    let scale = 1.0 + rbar.norm() + (rx * dx_hat_n).norm();
    if (bases.z.tr_mul(&rho)).norm() > CONSISTENCY_TOL * scale {
        return Err(Error::InconsistentEndpoint);
    }
    let reduced = bases.y.tr_mul(&(&s * &bases.y));
    let chol = CholeskyFactor::new(&reduced).ok_or(Error::SingularEndpointOperator)?;
    Ok(&bases.y * chol.solve_vec(&bases.y.tr_mul(&rho)))
}

/// `δx = δx̂ − δX_θβ`, `δu = δû − δU_θβ`, multipliers likewise.
pub fn combine(hat: &HatDirection, chk: &CheckDirection, beta: &DVector<f64>) -> Step {
    let comb = |a: &[DVector<f64>], b: &[DMatrix<f64>]| -> Vec<DVector<f64>> {
        a.par_iter().zip(b.par_iter()).map(|(v, m)| v - m * beta).collect()
    };
    Step {
        dx: comb(&hat.dx, &chk.dx),
        du: comb(&hat.du, &chk.du),
        dyn_multipliers: comb(&hat.dyn_multipliers, &chk.dyn_multipliers),
        stage_multipliers: comb(&hat.stage_multipliers, &chk.stage_multipliers),
        endpoint_multiplier: beta.clone(),
    }
}

/// Quadratic model of the objective along the step: `m(α) = α·d1 + ½α²·d2`,
/// where `d1 = gᵀw` and `d2 = wᵀHw` of the LQ subproblem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ImprovementModel {
    pub d1: f64,
    pub d2: f64,
}

impl ImprovementModel {
    /// Predicted change of the LQ objective for step length `α`.
    pub fn change(&self, alpha: f64) -> f64 {
        alpha * self.d1 + 0.5 * alpha * alpha * self.d2
    }
}

/// `cᵀλ⁺`: gaps weighted by the post-step multipliers.
pub fn gap_multiplier_product(lq: &LqApproximation, step: &Step) -> f64 {
    let mut acc = lq.initial_gap.dot(&step.dyn_multipliers[0]) + lq.endpoint_gap.dot(&step.endpoint_multiplier);
    for (k, s) in lq.stages.iter().enumerate() {
        acc += s.dyn_gap.dot(&step.dyn_multipliers[k + 1]) + s.stage_gap.dot(&step.stage_multipliers[k]);
    }
    acc
}

/// Build the step model from both value models.
///
/// At α = 1 the objective model is `Φ(ŵ) + ½β⁺ᵀ(ΣΔV̌₁)β⁺`; the KKT
/// conditions split it into `gᵀw = 2m(1) − cᵀλ⁺` and `wᵀHw = 2cᵀλ⁺ − 2m(1)`.
pub fn improvement_model(
    hat_value: &HatValueModel,
    check_value: Option<&CheckValueModel>,
    beta: &DVector<f64>,
    initial_gap: &DVector<f64>,
    gap_dot: f64,
) -> ImprovementModel {
    let mut full = hat_value.model_value(initial_gap);
    if let Some(cv) = check_value {
        if !beta.is_empty() {
            full += 0.5 * beta.dot(&(cv.total_dv1() * beta));
        }
    }
    ImprovementModel { d1: 2.0 * full - gap_dot, d2: 2.0 * gap_dot - 2.0 * full }
}

/// Expected decrease of the LQ objective after a step of length `α`
/// (positive when the model predicts descent).
pub fn total_expected_improvement(
    hat_value: &HatValueModel,
    check_value: Option<&CheckValueModel>,
    beta: &DVector<f64>,
    initial_gap: &DVector<f64>,
    gap_dot: f64,
    alpha: f64,
) -> f64 {
    -improvement_model(hat_value, check_value, beta, initial_gap, gap_dot).change(alpha)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct DirectionOptions {
    pub formulation: Formulation,
    pub endpoint: EndpointFactorization,
    /// Fall back to `null-qr` when the Schur endpoint operator is singular.
    pub fallback: bool,
    pub rank_tol: Option<f64>,
    pub stage_basis: BasisBackend,
}

impl Default for DirectionOptions {
    fn default() -> Self {
        Self {
            formulation: Formulation::default(),
            endpoint: EndpointFactorization::Schur,
            fallback: true,
            rank_tol: None,
            stage_basis: BasisBackend::Qr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchDirection {
    pub step: Step,
    /// K̂ per stage, for feedback in nonlinear rollouts.
    pub feedback: Vec<DMatrix<f64>>,
    pub model: ImprovementModel,
    /// Factorization actually used for the endpoint multiplier.
    pub endpoint_route: EndpointFactorization,
    pub seconds: f64,
}

/// Full Newton direction of the LQ subproblem with Levenberg–Marquardt term `reg`.
pub fn compute_direction(lq: &LqApproximation, reg: f64, opts: &DirectionOptions) -> Result<SearchDirection> {
    let start = Instant::now();
    let sweep = SweepOptions { reg, formulation: opts.formulation, rank_tol: opts.rank_tol, basis: opts.stage_basis };
    let (hat, hat_value) = backward_pass_hat(lq, &sweep)?;
    let hat_dir = rollout_hat(lq, &hat, &hat_value);
    let nr = lq.endpoint_dim();
    let n = lq.horizon();
    let (step, check_value, route) = if nr == 0 {
        let step = Step {
            dx: hat_dir.dx,
            du: hat_dir.du,
            dyn_multipliers: hat_dir.dyn_multipliers,
            stage_multipliers: hat_dir.stage_multipliers,
            endpoint_multiplier: DVector::zeros(0),
        };
        (step, None, opts.endpoint)
    } else {
        let (chk, chk_value) = backward_pass_check(lq, &hat)?;
        let chk_dir = rollout_check(lq, &hat, &hat_value, &chk, &chk_value);
        let rx = &lq.endpoint_jacobian;
        let tol = opts.rank_tol.unwrap_or_else(|| default_rank_tol(nr, nr));
        let nullspace = |f: EndpointFactorization| {
            endpoint_multiplier_nullspace(rx, &lq.endpoint_gap, &hat_dir.dx[n], &chk_dir.dx[n], tol, f.backend())
        };
        let (beta, route) = match opts.endpoint {
            EndpointFactorization::Schur => {
                match endpoint_multiplier_schur(rx, &lq.endpoint_gap, &hat_dir.dx[n], &chk_dir.dx[n]) {
                    Ok(b) => (b, EndpointFactorization::Schur),
                    Err(Error::SingularEndpointOperator) if opts.fallback => {
                        (nullspace(EndpointFactorization::NullQr)?, EndpointFactorization::NullQr)
                    }
                    Err(e) => return Err(e),
                }
            }
            f => (nullspace(f)?, f),
        };
        (combine(&hat_dir, &chk_dir, &beta), Some(chk_value), route)
    };
    let gap_dot = gap_multiplier_product(lq, &step);
    let model = improvement_model(&hat_value, check_value.as_ref(), &step.endpoint_multiplier, &lq.initial_gap, gap_dot);
    Ok(SearchDirection {
        feedback: hat.feedback_gains(),
        step,
        model,
        endpoint_route: route,
        seconds: start.elapsed().as_secs_f64(),
    })
}
