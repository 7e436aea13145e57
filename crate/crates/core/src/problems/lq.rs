//! Linear dynamics with quadratic costs, in forward and inverse encodings,
//! plus random LQ subproblems for oracle testing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{CostDerivatives, Curvature, LqApproximation, StageFunctions, StageLq};
use crate::problems::costs::QuadraticCost;

/// `x' = A x + B u + c`, optionally with `h = H_x x + H_u u + h₀`.
#[derive(Clone, Debug)]
pub struct LinearStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub hx: DMatrix<f64>,
    pub hu: DMatrix<f64>,
    pub h0: DVector<f64>,
    pub cost: QuadraticCost,
}

impl LinearStage {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, cost: QuadraticCost) -> Self {
        let (nx, nu) = (a.nrows(), b.ncols());
        Self {
            a,
            b,
            c: DVector::zeros(nx),
            hx: DMatrix::zeros(0, nx),
            hu: DMatrix::zeros(0, nu),
            h0: DVector::zeros(0),
            cost,
        }
    }

    /// The same dynamics with controls `ũ = (w, u)`, `x' = A x + w + c`, and the
    /// stagewise constraint `w − B u = 0`. The cost gains `½ρ‖w − Bu‖²`, which
    /// vanishes together with its gradient on the constraint, so the optimum is
    /// unchanged while `Q_uu` stays positive definite.
    pub fn inverse_encoding(&self, rho: f64) -> LinearStage {
        let (nx, nu) = (self.a.nrows(), self.b.ncols());
        let mut b = DMatrix::zeros(nx, nx + nu);
        b.view_mut((0, 0), (nx, nx)).fill_with_identity();
        let mut hu = DMatrix::zeros(nx, nx + nu);
        hu.view_mut((0, 0), (nx, nx)).fill_with_identity();
        hu.view_mut((0, nx), (nx, nu)).copy_from(&(-&self.b));
        let mut r = hu.tr_mul(&hu) * rho;
        r.view_mut((nx, nx), (nu, nu)).add_assign(&self.cost.r);
        let mut n = DMatrix::zeros(nx, nx + nu);
        n.view_mut((0, nx), (nx, nu)).copy_from(&self.cost.n);
        let mut u_ref = DVector::zeros(nx + nu);
        u_ref.rows_mut(nx, nu).copy_from(&self.cost.u_ref);
        u_ref.rows_mut(0, nx).copy_from(&(&self.b * &self.cost.u_ref));
        LinearStage {
            a: self.a.clone(),
            b,
            c: self.c.clone(),
            hx: DMatrix::zeros(nx, nx),
            hu,
            h0: DVector::zeros(nx),
            cost: QuadraticCost { q: self.cost.q.clone(), r, n, x_ref: self.cost.x_ref.clone(), u_ref },
        }
    }
}

trait AddAssignView {
    fn add_assign(&mut self, m: &DMatrix<f64>);
}

impl AddAssignView for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign(&mut self, m: &DMatrix<f64>) {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                self[(i, j)] += m[(i, j)];
            }
        }
    }
}

impl StageFunctions for LinearStage {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn constraint_dim(&self) -> usize {
        self.hu.nrows()
    }
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.cost.value(x, u)
    }
    fn cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        self.cost.derivatives(x, u)
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }
    fn dynamics_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
    fn dynamics_curvature(&self, x: &DVector<f64>, u: &DVector<f64>, _l: &DVector<f64>) -> Option<Curvature> {
        Some(zero_curvature(x.len(), u.len()))
    }
    fn constraint(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.hx * x + &self.hu * u + &self.h0
    }
    fn constraint_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.hx.clone(), self.hu.clone())
    }
    fn constraint_curvature(&self, x: &DVector<f64>, u: &DVector<f64>, _l: &DVector<f64>) -> Option<Curvature> {
        Some(zero_curvature(x.len(), u.len()))
    }
}

fn zero_curvature(nx: usize, nu: usize) -> Curvature {
    Curvature { xx: DMatrix::zeros(nx, nx), xu: DMatrix::zeros(nx, nu), uu: DMatrix::zeros(nu, nu) }
}

/// Dimensions of a random LQ subproblem.
#[derive(Clone, Copy, Debug)]
pub struct RandomLqDims {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    /// Stagewise constraints per stage (must be below `control_dim`).
    pub constraint_dim: usize,
    pub endpoint_dim: usize,
}

impl RandomLqDims {
    /// Largest endpoint dimension that keeps random instances reachable.
    pub fn max_endpoint_dim(&self) -> usize {
        self.state_dim.min(self.horizon * (self.control_dim - self.constraint_dim))
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn uvec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Random LQ subproblem with strictly convex stage costs, random gaps,
/// gradients and stagewise constraints.
pub fn random_lq(seed: u64, dims: RandomLqDims) -> LqApproximation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, nu, nh) = (dims.state_dim, dims.control_dim, dims.constraint_dim);
    let stages = (0..dims.horizon)
        .map(|_| {
            let g = uniform(&mut rng, nx + nu, nx + nu, 1.0);
            let mut h = &g * g.transpose() / (nx + nu) as f64;
            for i in 0..nx + nu {
                h[(i, i)] += 0.1;
            }
            StageLq {
                lx: uvec(&mut rng, nx, 1.0),
                lu: uvec(&mut rng, nu, 1.0),
                lxx: h.view((0, 0), (nx, nx)).clone_owned(),
                lxu: h.view((0, nx), (nx, nu)).clone_owned(),
                luu: h.view((nx, nx), (nu, nu)).clone_owned(),
                fx: DMatrix::identity(nx, nx) + uniform(&mut rng, nx, nx, 0.3),
                fu: uniform(&mut rng, nx, nu, 1.0),
                hx: uniform(&mut rng, nh, nx, 1.0),
                hu: uniform(&mut rng, nh, nu, 1.0),
                dyn_gap: uvec(&mut rng, nx, 0.5),
                stage_gap: uvec(&mut rng, nh, 0.5),
            }
        })
        .collect();
    let g = uniform(&mut rng, nx, nx, 1.0);
    let terminal_hessian = &g * g.transpose() / nx as f64 + DMatrix::identity(nx, nx) * 0.1;
    LqApproximation {
        stages,
        initial_gap: uvec(&mut rng, nx, 0.5),
        terminal_gradient: uvec(&mut rng, nx, 1.0),
        terminal_hessian: (&terminal_hessian + terminal_hessian.transpose()) * 0.5,
        endpoint_jacobian: uniform(&mut rng, dims.endpoint_dim, nx, 1.0),
        endpoint_gap: uvec(&mut rng, dims.endpoint_dim, 0.5),
    }
}

/// Repeat the endpoint rows of an LQ subproblem.
pub fn duplicate_lq_endpoint(lq: &LqApproximation, times: usize) -> LqApproximation {
    let mut out = lq.clone();
    let r = lq.endpoint_dim();
    out.endpoint_jacobian = DMatrix::from_fn(r * times, lq.state_dim(), |i, j| lq.endpoint_jacobian[(i % r, j)]);
    out.endpoint_gap = DVector::from_fn(r * times, |i, _| lq.endpoint_gap[i % r]);
    out
}

/// Repeat the stagewise constraint rows of an LQ subproblem.
pub fn duplicate_lq_stagewise(lq: &LqApproximation, times: usize) -> LqApproximation {
    let mut out = lq.clone();
    for s in &mut out.stages {
        let r = s.constraint_dim();
        let (hx, hu, h) = (s.hx.clone(), s.hu.clone(), s.stage_gap.clone());
        s.hx = DMatrix::from_fn(r * times, hx.ncols(), |i, j| hx[(i % r, j)]);
        s.hu = DMatrix::from_fn(r * times, hu.ncols(), |i, j| hu[(i % r, j)]);
        s.stage_gap = DVector::from_fn(r * times, |i, _| h[i % r]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn inverse_encoding_agrees_on_constraint_manifold() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let fwd = LinearStage::new(a, b.clone(), QuadraticCost::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.5));
        let inv = fwd.inverse_encoding(1.0);
        let x = dvector![0.3, -0.2];
        let u = dvector![0.7];
        let w = &b * &u;
        let ut = dvector![w[0], w[1], u[0]];
        assert!(inv.constraint(&x, &ut).norm() < 1e-15);
        assert!((inv.dynamics(&x, &ut) - fwd.dynamics(&x, &u)).norm() < 1e-15);
        assert!((inv.cost(&x, &ut) - fwd.cost(&x, &u)).abs() < 1e-15);
    }

    #[test]
    fn random_is_deterministic() {
        let d = RandomLqDims { horizon: 3, state_dim: 3, control_dim: 2, constraint_dim: 1, endpoint_dim: 2 };
        let a = random_lq(9, d);
        let b = random_lq(9, d);
        assert_eq!(a.stages[2].fu, b.stages[2].fu);
        assert_eq!(a.endpoint_gap, b.endpoint_gap);
    }
}
