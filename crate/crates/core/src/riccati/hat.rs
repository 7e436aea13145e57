//! Endpoint-independent Riccati sweep and linear rollout.
//!
//! Per stage the condensed subproblem is
//!
//! ```text
//! min_δu  Q_uᵀδu + δxᵀQ_xuδu + ½δuᵀQ_uuδu   s.t.  h_xδx + h_uδu + h̄ = 0
//! ```
//!
//! solved as `δu = −k̂ − K̂δx` with stagewise multiplier `γ = γ_ff + Γδx`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    default_rank_tol, nullspace_bases_with, symmetrize, BasisBackend, CholeskyFactor, ColPivQr, NullRangeBases,
    GRAM_PIVOT_TOL,
};
use crate::model::LqApproximation;
use crate::saddle::CONSISTENCY_TOL;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    /// Unconstrained stages (forward dynamics).
    Forward,
    /// Stagewise constraints eliminated through `h_u Q_uu⁻¹ h_uᵀ`.
    InverseSchur,
    /// Stagewise constraints eliminated through null/range bases of `h_u`.
    #[default]
    InverseNullspace,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    /// Added to the diagonal of `Q_uu`.
    pub reg: f64,
    pub formulation: Formulation,
    /// `None` selects the size-dependent default.
    pub rank_tol: Option<f64>,
    pub basis: BasisBackend,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { reg: 0.0, formulation: Formulation::default(), rank_tol: None, basis: BasisBackend::Qr }
    }
}

/// Factorizations retained for the endpoint-dependent sweep.
#[derive(Clone, Debug)]
pub(crate) enum StageFactor {
    Forward {
        quu: CholeskyFactor,
    },
    Schur {
        quu: CholeskyFactor,
        /// `Q_uu⁻¹ h_uᵀ`.
        gain: DMatrix<f64>,
        schur: CholeskyFactor,
    },
    Nullspace {
        bases: NullRangeBases,
        qzz: CholeskyFactor,
        /// Column-pivoted QR of `h_u Y`.
        projected: ColPivQr,
    },
}

#[derive(Clone, Debug)]
pub struct StagePolicy {
    /// k̂.
    pub feedforward: DVector<f64>,
    /// K̂.
    pub feedback: DMatrix<f64>,
    /// γ_ff, the stagewise multiplier at δx = 0.
    pub multiplier_ff: DVector<f64>,
    /// Γ, so that γ = γ_ff + Γδx.
    pub multiplier_fb: DMatrix<f64>,
    /// Regularized `Q_uu`.
    pub quu: DMatrix<f64>,
    pub qxu: DMatrix<f64>,
    pub(crate) factor: Option<StageFactor>,
}

#[derive(Clone, Debug)]
pub struct HatPolicy {
    pub stages: Vec<StagePolicy>,
    pub formulation: Formulation,
}

impl HatPolicy {
    /// Drop the retained factorizations (the check sweep then refuses to run).
    pub fn release_factorizations(&mut self) {
        for s in &mut self.stages {
            s.factor = None;
        }
    }

    pub fn feedback_gains(&self) -> Vec<DMatrix<f64>> {
        self.stages.iter().map(|s| s.feedback.clone()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct HatValueModel {
    /// V̂_x, stages 0..=N.
    pub vx: Vec<DVector<f64>>,
    /// V_xx, stages 0..=N.
    pub vxx: Vec<DMatrix<f64>>,
    /// ΔV̂₁ = k̂ᵀQ_uu k̂ per stage.
    pub dv1: Vec<f64>,
    /// ΔV̂₂ = −k̂ᵀQ_u per stage.
    pub dv2: Vec<f64>,
    /// V̂_x1 = K̂ᵀQ_uu k̂ − Q_xu k̂.
    pub vx1: Vec<DVector<f64>>,
    /// V̂_x2 = Q_x − K̂ᵀQ_u.
    pub vx2: Vec<DVector<f64>>,
    /// Constant part of the quadratic value model, stages 0..=N.
    pub constant: Vec<f64>,
}

impl HatValueModel {
    /// Value of the LQ objective at the endpoint-independent direction,
    /// i.e. the model evaluated at δx₀ = f̄₀.
    pub fn model_value(&self, initial_gap: &DVector<f64>) -> f64 {
        self.constant[0] + self.vx[0].dot(initial_gap) + 0.5 * initial_gap.dot(&(&self.vxx[0] * initial_gap))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HatDirection {
    pub dx: Vec<DVector<f64>>,
    pub du: Vec<DVector<f64>>,
    /// ξ̂₀ … ξ̂_N.
    pub dyn_multipliers: Vec<DVector<f64>>,
    /// γ̂₀ … γ̂_{N−1}.
    pub stage_multipliers: Vec<DVector<f64>>,
}

/// Classical unconstrained policy `k̂ = Q_uu⁻¹Q_u`, `K̂ = Q_uu⁻¹Q_ux`.
pub fn policy_forward(qu: &DVector<f64>, quu: &DMatrix<f64>, qux: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = CholeskyFactor::new(quu).ok_or(Error::NotPositiveDefinite { stage: None })?;
    Ok((chol.solve_vec(qu), chol.solve(qux)))
}

/// Output of a constrained stage policy.
#[derive(Clone, Debug)]
pub struct ConstrainedPolicy {
    pub feedforward: DVector<f64>,
    pub feedback: DMatrix<f64>,
    pub multiplier_ff: DVector<f64>,
    pub multiplier_fb: DMatrix<f64>,
    pub(crate) factor: StageFactor,
}

/// Stage policy eliminating `h` through the Schur complement `h_u Q_uu⁻¹ h_uᵀ`.
pub fn policy_inverse_schur(
    qu: &DVector<f64>,
    quu: &DMatrix<f64>,
    qux: &DMatrix<f64>,
    hx: &DMatrix<f64>,
    hu: &DMatrix<f64>,
    hbar: &DVector<f64>,
) -> Result<ConstrainedPolicy> {
    let chol = CholeskyFactor::new(quu).ok_or(Error::NotPositiveDefinite { stage: None })?;
    let ku = chol.solve_vec(qu);
    let kku = chol.solve(qux);
    let gain = chol.solve(&hu.transpose());
    let sh = hu * &gain;
    let schur = CholeskyFactor::new_gram(&sh, GRAM_PIVOT_TOL).ok_or(Error::SingularConstraintBlock { stage: 0 })?;
    let ks = hbar - hu * &ku;
    let kks = hx - hu * &kku;
    let gamma_ff = schur.solve_vec(&ks);
    let gamma_fb = schur.solve(&kks);
    Ok(ConstrainedPolicy {
        feedforward: ku + &gain * &gamma_ff,
        feedback: kku + &gain * &gamma_fb,
        multiplier_ff: gamma_ff,
        multiplier_fb: gamma_fb,
        factor: StageFactor::Schur { quu: chol, gain, schur },
    })
}

/// Stage policy parameterizing `δu = Z·δz + Y·δy` with `Z` spanning `null(h_u)`.
#[allow(clippy::too_many_arguments)]
pub fn policy_inverse_nullspace(
    qu: &DVector<f64>,
    quu: &DMatrix<f64>,
    qux: &DMatrix<f64>,
    hx: &DMatrix<f64>,
    hu: &DMatrix<f64>,
    hbar: &DVector<f64>,
    rank_tol: f64,
    basis: BasisBackend,
) -> Result<ConstrainedPolicy> {
    let nu = quu.nrows();
    let bases = nullspace_bases_with(hu, rank_tol, basis);
    let (z, y) = (&bases.z, &bases.y);
    let qzz = z.transpose() * quu * z;
    let qzz = CholeskyFactor::new(&qzz).ok_or(Error::NotPositiveDefinite { stage: None })?;
    let projected = ColPivQr::new(&(hu * y), rank_tol);
    let kn = qzz.solve_vec(&z.tr_mul(qu));
    let kkn = qzz.solve(&z.tr_mul(qux));
    // Range part: h_u Y ν = h̄ (least squares, exact when consistent).
    let hbar_m = DMatrix::from_column_slice(hbar.len(), 1, hbar.as_slice());
    let (nu_ff, residual) = projected.solve_least_squares(&hbar_m);
    if residual > CONSISTENCY_TOL * (1.0 + hbar.norm()) {
        return Err(Error::SingularConstraintBlock { stage: 0 });
    }
    let (nu_fb, _) = projected.solve_least_squares(hx);
    // Q̆ = I − Z Q_zz⁻¹ Zᵀ Q_uu.
    let qbreve = DMatrix::identity(nu, nu) - z * qzz.solve(&(z.transpose() * quu));
    let feedforward = z * kn + &qbreve * (y * nu_ff.column(0));
    let feedback = z * kkn + &qbreve * (y * nu_fb);
    // Multipliers: (h_u Y)ᵀ γ = Yᵀ(Q_uu k̂ − Q_u), minimum norm.
    let rhs_ff = y.tr_mul(&(quu * &feedforward - qu));
    let rhs_fb = y.tr_mul(&(quu * &feedback - qux));
    let gamma_ff = projected.solve_transpose_min_norm(&DMatrix::from_column_slice(rhs_ff.len(), 1, rhs_ff.as_slice()));
    let gamma_fb = projected.solve_transpose_min_norm(&rhs_fb);
    Ok(ConstrainedPolicy {
        feedforward,
        feedback,
        multiplier_ff: gamma_ff.column(0).clone_owned(),
        multiplier_fb: gamma_fb,
        factor: StageFactor::Nullspace { bases, qzz, projected },
    })
}

fn at_stage(e: Error, k: usize) -> Error {
    match e {
        Error::NotPositiveDefinite { .. } => Error::NotPositiveDefinite { stage: Some(k) },
        Error::SingularConstraintBlock { .. } => Error::SingularConstraintBlock { stage: k },
        other => other,
    }
}

/// Backward sweep producing the endpoint-independent policy and value model.
pub fn backward_pass_hat(lq: &LqApproximation, opts: &SweepOptions) -> Result<(HatPolicy, HatValueModel)> {
    let n = lq.horizon();
    let mut vx = vec![DVector::zeros(0); n + 1];
    let mut vxx = vec![DMatrix::zeros(0, 0); n + 1];
    let mut constant = vec![0.0; n + 1];
    let (mut dv1, mut dv2) = (vec![0.0; n], vec![0.0; n]);
    let (mut vx1, mut vx2) = (vec![DVector::zeros(0); n], vec![DVector::zeros(0); n]);
    vx[n] = lq.terminal_gradient.clone();
    vxx[n] = lq.terminal_hessian.clone();
    let mut stages: Vec<Option<StagePolicy>> = vec![None; n];

    for k in (0..n).rev() {
        let s = &lq.stages[k];
        let (vxn, vxxn) = (&vx[k + 1], &vxx[k + 1]);
        let vplus = vxn + vxxn * &s.dyn_gap;
        let vxx_fx = vxxn * &s.fx;
        let vxx_fu = vxxn * &s.fu;
        let qx = &s.lx + s.fx.tr_mul(&vplus);
        let qu = &s.lu + s.fu.tr_mul(&vplus);
        let mut qxx = &s.lxx + s.fx.tr_mul(&vxx_fx);
        let qxu = &s.lxu + s.fx.tr_mul(&vxx_fu);
        let mut quu = &s.luu + s.fu.tr_mul(&vxx_fu);
        symmetrize(&mut qxx);
        symmetrize(&mut quu);
        for i in 0..quu.nrows() {
            quu[(i, i)] += opts.reg;
        }
        let qux = qxu.transpose();
        let nh = s.constraint_dim();

        let formulation = if nh == 0 { Formulation::Forward } else { opts.formulation };
        let policy = match formulation {
            Formulation::Forward => {
                if nh > 0 {
                    return Err(Error::InvalidOption(format!(
                        "stage {k} has {nh} stagewise constraints; the forward formulation cannot handle them"
                    )));
                }
                let chol = CholeskyFactor::new(&quu).ok_or(Error::NotPositiveDefinite { stage: Some(k) })?;
                StagePolicy {
                    feedforward: chol.solve_vec(&qu),
                    feedback: chol.solve(&qux),
                    multiplier_ff: DVector::zeros(0),
                    multiplier_fb: DMatrix::zeros(0, s.state_dim()),
                    quu: quu.clone(),
                    qxu: qxu.clone(),
                    factor: Some(StageFactor::Forward { quu: chol }),
                }
            }
            Formulation::InverseSchur => {
                let p = policy_inverse_schur(&qu, &quu, &qux, &s.hx, &s.hu, &s.stage_gap).map_err(|e| at_stage(e, k))?;
                StagePolicy {
                    feedforward: p.feedforward,
                    feedback: p.feedback,
                    multiplier_ff: p.multiplier_ff,
                    multiplier_fb: p.multiplier_fb,
                    quu: quu.clone(),
                    qxu: qxu.clone(),
                    factor: Some(p.factor),
                }
            }
            Formulation::InverseNullspace => {
                let tol = opts.rank_tol.unwrap_or_else(|| default_rank_tol(nh, s.control_dim()));
                let p = policy_inverse_nullspace(&qu, &quu, &qux, &s.hx, &s.hu, &s.stage_gap, tol, opts.basis)
                    .map_err(|e| at_stage(e, k))?;
                StagePolicy {
                    feedforward: p.feedforward,
                    feedback: p.feedback,
                    multiplier_ff: p.multiplier_ff,
                    multiplier_fb: p.multiplier_fb,
                    quu: quu.clone(),
                    qxu: qxu.clone(),
                    factor: Some(p.factor),
                }
            }
        };

        let (kf, kb) = (&policy.feedforward, &policy.feedback);
        let quu_k = &quu * kf;
        let v1 = kb.tr_mul(&quu_k) - &qxu * kf;
        let v2 = &qx - kb.tr_mul(&qu);
        let mut new_vxx = &qxx - &qxu * kb - kb.tr_mul(&qux) + kb.tr_mul(&(&quu * kb));
        symmetrize(&mut new_vxx);
        dv1[k] = kf.dot(&quu_k);
        dv2[k] = -kf.dot(&qu);
        constant[k] = constant[k + 1] + vxn.dot(&s.dyn_gap) + 0.5 * s.dyn_gap.dot(&(vxxn * &s.dyn_gap)) + dv2[k]
            + 0.5 * dv1[k];
        vx[k] = &v1 + &v2;
        vx1[k] = v1;
        vx2[k] = v2;
        vxx[k] = new_vxx;
        stages[k] = Some(policy);
    }

    let formulation = if lq.stages.iter().all(|s| s.constraint_dim() == 0) { Formulation::Forward } else { opts.formulation };
    let policy = HatPolicy { stages: stages.into_iter().map(|s| s.expect("every stage visited")).collect(), formulation };
    Ok((policy, HatValueModel { vx, vxx, dv1, dv2, vx1, vx2, constant }))
}

/// Linear rollout of the endpoint-independent policy, starting at `δx̂₀ = f̄₀`.
pub fn rollout_hat(lq: &LqApproximation, policy: &HatPolicy, value: &HatValueModel) -> HatDirection {
    let n = lq.horizon();
    let mut dx = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    let mut stage_multipliers = Vec::with_capacity(n);
    dx.push(lq.initial_gap.clone());
    for (s, p) in lq.stages.iter().zip(&policy.stages) {
        let x = dx.last().unwrap();
        let u = -(&p.feedforward + &p.feedback * x);
        stage_multipliers.push(&p.multiplier_ff + &p.multiplier_fb * x);
        let next = &s.fx * x + &s.fu * &u + &s.dyn_gap;
        du.push(u);
        dx.push(next);
    }
    let dyn_multipliers = (0..=n).map(|k| &value.vx[k] + &value.vxx[k] * &dx[k]).collect();
    HatDirection { dx, du, dyn_multipliers, stage_multipliers }
}
