//! Quadratic costs, endpoint constraints, and row-duplicating wrappers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::model::{wrap_angle, CostDerivatives, Curvature, EndpointConstraint, StageFunctions, TerminalCost};

/// `½(x − x_ref)ᵀQ(x − x_ref) + ½(u − u_ref)ᵀR(u − u_ref) + (x − x_ref)ᵀN(u − u_ref)`.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let (nx, nu) = (q.nrows(), r.nrows());
        Self { q, r, n: DMatrix::zeros(nx, nu), x_ref: DVector::zeros(nx), u_ref: DVector::zeros(nu) }
    }

    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        0.5 * dx.dot(&(&self.q * &dx)) + 0.5 * du.dot(&(&self.r * &du)) + dx.dot(&(&self.n * &du))
    }

    pub fn derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        CostDerivatives {
            lx: &self.q * &dx + &self.n * &du,
            lu: &self.r * &du + self.n.tr_mul(&dx),
            lxx: self.q.clone(),
            lxu: self.n.clone(),
            luu: self.r.clone(),
        }
    }
}

/// `½(x ⊖ x_ref)ᵀQ(x ⊖ x_ref)`, with the listed coordinates wrapped.
#[derive(Clone, Debug)]
pub struct QuadraticTerminal {
    pub q: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub angles: Vec<usize>,
}

impl QuadraticTerminal {
    fn diff(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut d = x - &self.x_ref;
        for &i in &self.angles {
            d[i] = wrap_angle(d[i]);
        }
        d
    }
}

impl TerminalCost for QuadraticTerminal {
    fn cost(&self, x: &DVector<f64>) -> f64 {
        let d = self.diff(x);
        0.5 * d.dot(&(&self.q * &d))
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * self.diff(x)
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
}

/// `r(x) = C x − d`.
#[derive(Clone, Debug)]
pub struct LinearEndpoint {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl EndpointConstraint for LinearEndpoint {
    fn dim(&self) -> usize {
        self.c.nrows()
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x - &self.d
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }
    fn curvature(&self, x: &DVector<f64>, _beta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }
}

/// Selected coordinates of `x ⊖ target`, with angle coordinates wrapped.
#[derive(Clone, Debug)]
pub struct StateTarget {
    pub target: DVector<f64>,
    pub rows: Vec<usize>,
    pub angles: Vec<usize>,
}

impl EndpointConstraint for StateTarget {
    fn dim(&self) -> usize {
        self.rows.len()
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|&i| {
                let d = x[i] - self.target[i];
                if self.angles.contains(&i) {
                    wrap_angle(d)
                } else {
                    d
                }
            }),
        )
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.rows.len(), x.len());
        for (r, &i) in self.rows.iter().enumerate() {
            j[(r, i)] = 1.0;
        }
        j
    }
    fn curvature(&self, x: &DVector<f64>, _beta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }
}

/// An endpoint constraint with every row repeated `times` times.
pub struct StackedEndpoint {
    pub inner: Arc<dyn EndpointConstraint>,
    pub times: usize,
}

fn repeat_rows(m: &DMatrix<f64>, times: usize) -> DMatrix<f64> {
    let r = m.nrows();
    DMatrix::from_fn(r * times, m.ncols(), |i, j| m[(i % r, j)])
}

fn repeat_vec(v: &DVector<f64>, times: usize) -> DVector<f64> {
    let r = v.len();
    DVector::from_fn(r * times, |i, _| v[i % r])
}

impl EndpointConstraint for StackedEndpoint {
    fn dim(&self) -> usize {
        self.inner.dim() * self.times
    }
    fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        repeat_vec(&self.inner.value(x), self.times)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        repeat_rows(&self.inner.jacobian(x), self.times)
    }
    fn curvature(&self, x: &DVector<f64>, beta: &DVector<f64>) -> Option<DMatrix<f64>> {
        let r = self.inner.dim();
        let folded = DVector::from_fn(r, |i, _| (0..self.times).map(|t| beta[t * r + i]).sum());
        self.inner.curvature(x, &folded)
    }
}

/// A stage whose stagewise constraint rows are repeated `times` times.
pub struct StackedConstraintStage {
    pub inner: Arc<dyn StageFunctions>,
    pub times: usize,
}

impl StageFunctions for StackedConstraintStage {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn constraint_dim(&self) -> usize {
        self.inner.constraint_dim() * self.times
    }
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.inner.cost(x, u)
    }
    fn cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
        self.inner.cost_derivatives(x, u)
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.inner.dynamics(x, u)
    }
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        self.inner.dynamics_jacobians(x, u)
    }
    fn dynamics_curvature(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> Option<Curvature> {
        self.inner.dynamics_curvature(x, u, lambda)
    }
    fn constraint(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        repeat_vec(&self.inner.constraint(x, u), self.times)
    }
    fn constraint_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (hx, hu) = self.inner.constraint_jacobians(x, u);
        (repeat_rows(&hx, self.times), repeat_rows(&hu, self.times))
    }
    fn constraint_curvature(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> Option<Curvature> {
        let r = self.inner.constraint_dim();
        let folded = DVector::from_fn(r, |i, _| (0..self.times).map(|t| lambda[t * r + i]).sum());
        self.inner.constraint_curvature(x, u, &folded)
    }
}
