//! Endpoint-dependent sweep: the same recursion as `hat`, seeded with
//! `−r_xᵀ` and without gaps or gradients, one column per endpoint row.
//! Only triangular solves against the factors retained by `hat` are used.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LqApproximation;
use crate::riccati::hat::{HatPolicy, HatValueModel, StageFactor};

#[derive(Clone, Debug)]
pub struct CheckPolicy {
    /// ǩ per stage, `n_u × n_r`.
    pub feedforward: Vec<DMatrix<f64>>,
    /// Stagewise multiplier feedforward per stage, `n_h × n_r`.
    pub multiplier_ff: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct CheckValueModel {
    /// V̌_xθ, stages 0..=N, `n_x × n_r`.
    pub vx: Vec<DMatrix<f64>>,
    /// ΔV̌₁ = ǩᵀQ_uuǩ per stage.
    pub dv1: Vec<DMatrix<f64>>,
    /// ΔV̌₂ = −ǩᵀQ_uθ per stage.
    pub dv2: Vec<DMatrix<f64>>,
    /// V̌_xθ1 = K̂ᵀQ_uuǩ − Q_xuǩ.
    pub vx1: Vec<DMatrix<f64>>,
    /// V̌_xθ2 = Q_xθ − K̂ᵀQ_uθ.
    pub vx2: Vec<DMatrix<f64>>,
}

impl CheckValueModel {
    /// Σ ΔV̌₁, which equals the endpoint operator `r_x δX_N`.
    pub fn total_dv1(&self) -> DMatrix<f64> {
        let nr = self.vx[0].ncols();
        let mut acc = DMatrix::zeros(nr, nr);
        for d in &self.dv1 {
            acc += d;
        }
        (&acc + acc.transpose()) * 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckDirection {
    /// δX_θ, stages 0..=N, `n_x × n_r`.
    pub dx: Vec<DMatrix<f64>>,
    /// δU_θ, `n_u × n_r`.
    pub du: Vec<DMatrix<f64>>,
    /// Ξ̌, stages 0..=N.
    pub dyn_multipliers: Vec<DMatrix<f64>>,
    /// Γ̌.
    pub stage_multipliers: Vec<DMatrix<f64>>,
}

pub fn backward_pass_check(lq: &LqApproximation, hat: &HatPolicy) -> Result<(CheckPolicy, CheckValueModel)> {
    let n = lq.horizon();
    let nr = lq.endpoint_dim();
    if hat.stages.len() != n || hat.stages.iter().any(|s| s.factor.is_none()) {
        return Err(Error::StaleFactorization);
    }
    let mut vx = vec![DMatrix::zeros(0, 0); n + 1];
    let mut feedforward = vec![DMatrix::zeros(0, 0); n];
    let mut multiplier_ff = vec![DMatrix::zeros(0, 0); n];
    let (mut dv1, mut dv2) = (vec![DMatrix::zeros(nr, nr); n], vec![DMatrix::zeros(nr, nr); n]);
    let (mut vx1, mut vx2) = (vec![DMatrix::zeros(0, 0); n], vec![DMatrix::zeros(0, 0); n]);
    vx[n] = -lq.endpoint_jacobian.transpose();

    for k in (0..n).rev() {
        let s = &lq.stages[k];
        let p = &hat.stages[k];
        let next = &vx[k + 1];
        let qxt = s.fx.tr_mul(next);
        let qut = s.fu.tr_mul(next);
        let (kc, gamma) = match p.factor.as_ref().expect("checked above") {
            StageFactor::Forward { quu } => (quu.solve(&qut), DMatrix::zeros(0, nr)),
            StageFactor::Schur { quu, gain, schur } => {
                let kt = quu.solve(&qut);
                let kst = -(&s.hu * &kt);
                let g = schur.solve(&kst);
                (kt + gain * &g, g)
            }
            StageFactor::Nullspace { bases, qzz, projected } => {
                let z = &bases.z;
                let kc = z * qzz.solve(&z.tr_mul(&qut));
                let rhs = bases.y.tr_mul(&(&p.quu * &kc - &qut));
                (kc, projected.solve_transpose_min_norm(&rhs))
            }
        };
        let quu_k = &p.quu * &kc;
        let v1 = p.feedback.tr_mul(&quu_k) - &p.qxu * &kc;
        let v2 = &qxt - p.feedback.tr_mul(&qut);
        dv1[k] = kc.tr_mul(&quu_k);
        dv2[k] = -kc.tr_mul(&qut);
        vx[k] = &v1 + &v2;
        vx1[k] = v1;
        vx2[k] = v2;
        feedforward[k] = kc;
        multiplier_ff[k] = gamma;
    }
    Ok((CheckPolicy { feedforward, multiplier_ff }, CheckValueModel { vx, dv1, dv2, vx1, vx2 }))
}

/// Linear rollout of the endpoint-dependent columns from `δX_θ,0 = 0`.
pub fn rollout_check(
    lq: &LqApproximation,
    hat: &HatPolicy,
    hat_value: &HatValueModel,
    policy: &CheckPolicy,
    value: &CheckValueModel,
) -> CheckDirection {
    let n = lq.horizon();
    let nr = lq.endpoint_dim();
    let mut dx = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    let mut stage_multipliers = Vec::with_capacity(n);
    dx.push(DMatrix::zeros(lq.state_dim(), nr));
    for (k, (s, p)) in lq.stages.iter().zip(&hat.stages).enumerate() {
        let x = dx.last().unwrap();
        let u = -(&policy.feedforward[k] + &p.feedback * x);
        stage_multipliers.push(&policy.multiplier_ff[k] + &p.multiplier_fb * x);
        let next = &s.fx * x + &s.fu * &u;
        du.push(u);
        dx.push(next);
    }
    let dyn_multipliers = (0..=n).into_par_iter().map(|k| &value.vx[k] + &hat_value.vxx[k] * &dx[k]).collect();
    CheckDirection { dx, du, dyn_multipliers, stage_multipliers }
}
