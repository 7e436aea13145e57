//! Mechanical plants `M(q)·a + c(q, v) = S·τ` written once over a generic
//! scalar so that values, Jacobians and Hessian contractions all come from the
//! same code (forward-mode dual numbers).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_dual::{hessian, jacobian, Dual2DVec64, DualDVec64, DualNum};
use serde::{Deserialize, Serialize};

use crate::model::{CostDerivatives, Curvature, StageFunctions};
use crate::problems::costs::QuadraticCost;

pub trait Scalar: DualNum<Primitive = f64> {}
impl<T: DualNum<Primitive = f64>> Scalar for T {}

pub trait Mechanism: Send + Sync + 'static {
    fn dofs(&self) -> usize;
    /// Selection `S` (`n_q × n_τ`).
    fn actuation(&self) -> DMatrix<f64>;
    fn mass_matrix<D: Scalar>(&self, q: &[D]) -> Vec<Vec<D>>;
    /// Coriolis, centrifugal, gravity and dissipative terms.
    fn bias<D: Scalar>(&self, q: &[D], v: &[D]) -> Vec<D>;
    fn energy(&self, q: &[f64], v: &[f64]) -> f64;
    /// Configuration coordinates that are angles.
    fn angles(&self) -> Vec<usize>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    SemiImplicitEuler,
    ExplicitEuler,
    Rk4,
}

fn c<D: Scalar>(v: f64) -> D {
    D::from(v)
}

/// Solve `M x = b` for symmetric positive definite `M` (no pivoting needed).
pub fn solve_spd<D: Scalar>(mut m: Vec<Vec<D>>, mut b: Vec<D>) -> Vec<D> {
    let n = b.len();
    for k in 0..n {
        for i in (k + 1)..n {
            let l = m[i][k].clone() / &m[k][k];
            for j in k..n {
                let t = l.clone() * &m[k][j];
                m[i][j] -= t;
            }
            let t = l * &b[k];
            b[i] -= t;
        }
    }
    let mut x = vec![c::<D>(0.0); n];
    for i in (0..n).rev() {
        let mut s = b[i].clone();
        for j in (i + 1)..n {
            s -= m[i][j].clone() * &x[j];
        }
        x[i] = s / &m[i][i];
    }
    x
}

fn mat_vec<D: Scalar>(m: &[Vec<D>], a: &[D]) -> Vec<D> {
    m.iter()
        .map(|row| row.iter().zip(a).fold(c::<D>(0.0), |acc, (mij, aj)| acc + mij.clone() * aj))
        .collect()
}

fn actuate<D: Scalar>(s: &DMatrix<f64>, tau: &[D]) -> Vec<D> {
    (0..s.nrows())
        .map(|i| (0..s.ncols()).fold(c::<D>(0.0), |acc, j| acc + tau[j].clone() * s[(i, j)]))
        .collect()
}

fn axpy<D: Scalar>(x: &[D], h: f64, y: &[D]) -> Vec<D> {
    x.iter().zip(y).map(|(a, b)| a.clone() + b.clone() * h).collect()
}

/// One step of `(q, v)` under acceleration `accel(q, v)`.
pub fn integrate<D: Scalar>(
    integrator: Integrator,
    dt: f64,
    q: &[D],
    v: &[D],
    accel: impl Fn(&[D], &[D]) -> Vec<D>,
) -> (Vec<D>, Vec<D>) {
    match integrator {
        Integrator::SemiImplicitEuler => {
            let a = accel(q, v);
            let v1 = axpy(v, dt, &a);
            let q1 = axpy(q, dt, &v1);
            (q1, v1)
        }
        Integrator::ExplicitEuler => {
            let a = accel(q, v);
            (axpy(q, dt, v), axpy(v, dt, &a))
        }
        Integrator::Rk4 => {
            let k1q = v.to_vec();
            let k1v = accel(q, v);
            let (q2, v2) = (axpy(q, 0.5 * dt, &k1q), axpy(v, 0.5 * dt, &k1v));
            let k2q = v2.clone();
            let k2v = accel(&q2, &v2);
            let (q3, v3) = (axpy(q, 0.5 * dt, &k2q), axpy(v, 0.5 * dt, &k2v));
            let k3q = v3.clone();
            let k3v = accel(&q3, &v3);
            let (q4, v4) = (axpy(q, dt, &k3q), axpy(v, dt, &k3v));
            let k4q = v4.clone();
            let k4v = accel(&q4, &v4);
            let comb = |x: &[D], k1: &[D], k2: &[D], k3: &[D], k4: &[D]| -> Vec<D> {
                (0..x.len())
                    .map(|i| {
                        x[i].clone()
                            + (k1[i].clone() + k2[i].clone() * 2.0 + k3[i].clone() * 2.0 + k4[i].clone()) * (dt / 6.0)
                    })
                    .collect()
            };
            (comb(q, &k1q, &k2q, &k3q, &k4q), comb(v, &k1v, &k2v, &k3v, &k4v))
        }
    }
}

/// `a = M(q)⁻¹ (Sτ − c(q, v))`.
pub fn forward_acceleration<M: Mechanism, D: Scalar>(mech: &M, s: &DMatrix<f64>, q: &[D], v: &[D], tau: &[D]) -> Vec<D> {
    let rhs: Vec<D> = actuate(s, tau).into_iter().zip(mech.bias(q, v)).map(|(f, b)| f - b).collect();
    solve_spd(mech.mass_matrix(q), rhs)
}

/// `M(q)a + c(q, v) − Sτ`.
pub fn inverse_dynamics_residual<M: Mechanism, D: Scalar>(
    mech: &M,
    s: &DMatrix<f64>,
    q: &[D],
    v: &[D],
    a: &[D],
    tau: &[D],
) -> Vec<D> {
    let ma = mat_vec(&mech.mass_matrix(q), a);
    let b = mech.bias(q, v);
    let st = actuate(s, tau);
    (0..ma.len()).map(|i| ma[i].clone() + b[i].clone() - st[i].clone()).collect()
}

/// Scalar-generic stage map `z = (x, u) ↦ outputs`.
pub trait GenericMap: Send + Sync {
    fn eval<D: Scalar>(&self, z: &[D]) -> Vec<D>;
}

fn split_blocks(m: &DMatrix<f64>, nx: usize, nu: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (m.columns(0, nx).clone_owned(), m.columns(nx, nu).clone_owned())
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

fn value_of<G: GenericMap>(g: &G, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(g.eval::<f64>(stack(x, u).as_slice()))
}

fn jacobian_of<G: GenericMap>(g: &G, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let z = stack(x, u);
    let (_, j) = jacobian(|zz: DVector<DualDVec64>| DVector::from_vec(g.eval(zz.as_slice())), &z);
    split_blocks(&j, x.len(), u.len())
}

fn curvature_of<G: GenericMap>(g: &G, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> Curvature {
    let z = stack(x, u);
    let (_, _, h) = hessian(
        |zz: DVector<Dual2DVec64>| {
            g.eval(zz.as_slice())
                .into_iter()
                .zip(lambda.iter())
                .fold(Dual2DVec64::from(0.0), |acc, (o, l)| acc + o * *l)
        },
        &z,
    );
    let (nx, nu) = (x.len(), u.len());
    Curvature {
        xx: h.view((0, 0), (nx, nx)).clone_owned(),
        xu: h.view((0, nx), (nx, nu)).clone_owned(),
        uu: h.view((nx, nx), (nu, nu)).clone_owned(),
    }
}

/// Forward-dynamics stage: `u = τ`.
pub struct ForwardStage<M: Mechanism> {
    pub mech: Arc<M>,
    pub dt: f64,
    pub integrator: Integrator,
    pub cost: QuadraticCost,
    actuation: DMatrix<f64>,
}

impl<M: Mechanism> ForwardStage<M> {
    pub fn new(mech: Arc<M>, dt: f64, integrator: Integrator, cost: QuadraticCost) -> Self {
        let actuation = mech.actuation();
        Self { mech, dt, integrator, cost, actuation }
    }
}

impl<M: Mechanism> GenericMap for ForwardStage<M> {
    fn eval<D: Scalar>(&self, z: &[D]) -> Vec<D> {
        let nq = self.mech.dofs();
        let (q, v, tau) = (&z[..nq], &z[nq..2 * nq], &z[2 * nq..]);
        let (q1, v1) = integrate(self.integrator, self.dt, q, v, |q, v| {
            forward_acceleration(self.mech.as_ref(), &self.actuation, q, v, tau)
        });
        q1.into_iter().chain(v1).collect()
    }
}

/// Inverse-dynamics stage: `u = (a, τ)`, integrated with `a` held constant and
/// the equations of motion imposed as `h(x, u) = M(q)a + c(q, v) − Sτ = 0`.
pub struct InverseStage<M: Mechanism> {
    pub mech: Arc<M>,
    pub dt: f64,
    pub integrator: Integrator,
    pub cost: QuadraticCost,
    actuation: DMatrix<f64>,
}

impl<M: Mechanism> InverseStage<M> {
    pub fn new(mech: Arc<M>, dt: f64, integrator: Integrator, cost: QuadraticCost) -> Self {
        let actuation = mech.actuation();
        Self { mech, dt, integrator, cost, actuation }
    }
}

impl<M: Mechanism> GenericMap for InverseStage<M> {
    fn eval<D: Scalar>(&self, z: &[D]) -> Vec<D> {
        let nq = self.mech.dofs();
        let (q, v, a) = (&z[..nq], &z[nq..2 * nq], &z[2 * nq..3 * nq]);
        let (q1, v1) = integrate(self.integrator, self.dt, q, v, |_, _| a.to_vec());
        q1.into_iter().chain(v1).collect()
    }
}

/// The inverse-dynamics residual as its own generic map.
struct Residual<'a, M: Mechanism>(&'a InverseStage<M>);

impl<M: Mechanism> GenericMap for Residual<'_, M> {
    fn eval<D: Scalar>(&self, z: &[D]) -> Vec<D> {
        let nq = self.0.mech.dofs();
        let (q, v, a, tau) = (&z[..nq], &z[nq..2 * nq], &z[2 * nq..3 * nq], &z[3 * nq..]);
        inverse_dynamics_residual(self.0.mech.as_ref(), &self.0.actuation, q, v, a, tau)
    }
}

macro_rules! stage_common {
    () => {
        fn state_dim(&self) -> usize {
            2 * self.mech.dofs()
        }
        fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            self.cost.value(x, u)
        }
        fn cost_derivatives(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostDerivatives {
            self.cost.derivatives(x, u)
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            value_of(self, x, u)
        }
        fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            jacobian_of(self, x, u)
        }
        fn dynamics_curvature(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> Option<Curvature> {
            Some(curvature_of(self, x, u, lambda))
        }
    };
}

impl<M: Mechanism> StageFunctions for ForwardStage<M> {
    stage_common!();
    fn control_dim(&self) -> usize {
        self.actuation.ncols()
    }
}

impl<M: Mechanism> StageFunctions for InverseStage<M> {
    stage_common!();
    fn control_dim(&self) -> usize {
        self.mech.dofs() + self.actuation.ncols()
    }
    fn constraint_dim(&self) -> usize {
        self.mech.dofs()
    }
    fn constraint(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        value_of(&Residual(self), x, u)
    }
    fn constraint_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        jacobian_of(&Residual(self), x, u)
    }
    fn constraint_curvature(&self, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> Option<Curvature> {
        Some(curvature_of(&Residual(self), x, u, lambda))
    }
}

/// Two point masses on massless rods; `q₁` absolute from the downward
/// vertical, `q₂` relative to the first link.
#[derive(Clone, Debug)]
pub struct DoublePendulum {
    pub masses: [f64; 2],
    pub lengths: [f64; 2],
    pub gravity: f64,
    pub damping: f64,
    pub actuated: Vec<usize>,
}

impl Mechanism for DoublePendulum {
    fn dofs(&self) -> usize {
        2
    }
    fn actuation(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(2, self.actuated.len());
        for (j, &i) in self.actuated.iter().enumerate() {
            s[(i, j)] = 1.0;
        }
        s
    }
    fn mass_matrix<D: Scalar>(&self, q: &[D]) -> Vec<Vec<D>> {
        let ([m1, m2], [l1, l2]) = (self.masses, self.lengths);
        let c2 = q[1].cos();
        let m11 = c2.clone() * (2.0 * m2 * l1 * l2) + (m1 + m2) * l1 * l1 + m2 * l2 * l2;
        let m12 = c2 * (m2 * l1 * l2) + m2 * l2 * l2;
        vec![vec![m11, m12.clone()], vec![m12, c::<D>(m2 * l2 * l2)]]
    }
    fn bias<D: Scalar>(&self, q: &[D], v: &[D]) -> Vec<D> {
        let ([m1, m2], [l1, l2], g) = (self.masses, self.lengths, self.gravity);
        let h = q[1].sin() * (m2 * l1 * l2);
        let s1 = q[0].sin();
        let s12 = (q[0].clone() + &q[1]).sin();
        let c1 = -h.clone() * (v[0].clone() * &v[1] * 2.0 + v[1].clone() * &v[1])
            + s1 * ((m1 + m2) * g * l1)
            + s12.clone() * (m2 * g * l2)
            + v[0].clone() * self.damping;
        let c2 = h * (v[0].clone() * &v[0]) + s12 * (m2 * g * l2) + v[1].clone() * self.damping;
        vec![c1, c2]
    }
    fn energy(&self, q: &[f64], v: &[f64]) -> f64 {
        let ([m1, m2], [l1, l2], g) = (self.masses, self.lengths, self.gravity);
        let m = self.mass_matrix(q);
        let kinetic = 0.5 * (v[0] * (m[0][0] * v[0] + m[0][1] * v[1]) + v[1] * (m[1][0] * v[0] + m[1][1] * v[1]));
        let potential = -(m1 + m2) * g * l1 * q[0].cos() - m2 * g * l2 * (q[0] + q[1]).cos();
        kinetic + potential
    }
    fn angles(&self) -> Vec<usize> {
        vec![0, 1]
    }
}

/// Cart on a rail with a point-mass pole; `θ = 0` hangs down.
#[derive(Clone, Debug)]
pub struct Cartpole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    pub gravity: f64,
}

impl Mechanism for Cartpole {
    fn dofs(&self) -> usize {
        2
    }
    fn actuation(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0, 0.0])
    }
    fn mass_matrix<D: Scalar>(&self, q: &[D]) -> Vec<Vec<D>> {
        let (mc, mp, l) = (self.cart_mass, self.pole_mass, self.length);
        let off = q[1].cos() * (mp * l);
        vec![vec![c::<D>(mc + mp), off.clone()], vec![off, c::<D>(mp * l * l)]]
    }
    fn bias<D: Scalar>(&self, q: &[D], v: &[D]) -> Vec<D> {
        let (mp, l, g) = (self.pole_mass, self.length, self.gravity);
        let s = q[1].sin();
        vec![-s.clone() * (v[1].clone() * &v[1]) * (mp * l), s * (mp * g * l)]
    }
    fn energy(&self, q: &[f64], v: &[f64]) -> f64 {
        let m = self.mass_matrix(q);
        let kinetic = 0.5 * (v[0] * (m[0][0] * v[0] + m[0][1] * v[1]) + v[1] * (m[1][0] * v[0] + m[1][1] * v[1]));
        kinetic - self.pole_mass * self.gravity * self.length * q[1].cos()
    }
    fn angles(&self) -> Vec<usize> {
        vec![1]
    }
}

/// Planar point mass with smooth quadratic drag `c = d·√(‖v‖² + ε²)·v`.
#[derive(Clone, Debug)]
pub struct PointMass {
    pub mass: f64,
    pub drag: f64,
}

impl Mechanism for PointMass {
    fn dofs(&self) -> usize {
        2
    }
    fn actuation(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn mass_matrix<D: Scalar>(&self, _q: &[D]) -> Vec<Vec<D>> {
        vec![vec![c::<D>(self.mass), c::<D>(0.0)], vec![c::<D>(0.0), c::<D>(self.mass)]]
    }
    fn bias<D: Scalar>(&self, _q: &[D], v: &[D]) -> Vec<D> {
        let speed = (v[0].clone() * &v[0] + v[1].clone() * &v[1] + 1e-4).sqrt();
        vec![speed.clone() * &v[0] * self.drag, speed * &v[1] * self.drag]
    }
    fn energy(&self, _q: &[f64], v: &[f64]) -> f64 {
        0.5 * self.mass * (v[0] * v[0] + v[1] * v[1])
    }
    fn angles(&self) -> Vec<usize> {
        vec![]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dpend() -> DoublePendulum {
        DoublePendulum { masses: [1.0, 1.0], lengths: [0.5, 0.5], gravity: 9.81, damping: 0.0, actuated: vec![0, 1] }
    }

    #[test]
    fn solve_spd_matches_nalgebra() {
        let m = vec![vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]];
        let b = vec![1.0, -2.0, 0.5];
        let x = solve_spd(m.clone(), b.clone());
        let mm = DMatrix::from_fn(3, 3, |i, j| m[i][j]);
        let r = mm.lu().solve(&DVector::from_vec(b)).unwrap();
        assert!((DVector::from_vec(x) - r).norm() < 1e-14);
    }

    #[test]
    fn inverse_residual_vanishes_on_forward_acceleration() {
        let p = dpend();
        let s = p.actuation();
        let (q, v, tau) = ([0.3, -1.1], [0.7, 0.2], [1.5, -0.4]);
        let a = forward_acceleration(&p, &s, &q, &v, &tau);
        let r = inverse_dynamics_residual(&p, &s, &q, &v, &a, &tau);
        assert!(r.iter().all(|x: &f64| x.abs() < 1e-12));
        let cp = Cartpole { cart_mass: 1.0, pole_mass: 0.3, length: 0.6, gravity: 9.81 };
        let a = forward_acceleration(&cp, &cp.actuation(), &q, &v, &tau[..1]);
        let r = inverse_dynamics_residual(&cp, &cp.actuation(), &q, &v, &a, &tau[..1]);
        assert!(r.iter().all(|x: &f64| x.abs() < 1e-12));
    }

    #[test]
    fn lagrangian_consistency() {
        // d/dt ∂T/∂v − ∂T/∂q + ∂V/∂q must equal M a + c for any a; check the
        // energy balance dE/dt = vᵀSτ − damping·‖v‖² along a fine RK4 step.
        let p = dpend();
        let s = p.actuation();
        let (q, v, tau) = ([0.4, 0.9], [-0.3, 1.2], [0.5, 0.1]);
        let dt = 1e-5;
        let (q1, v1) = integrate(Integrator::Rk4, dt, &q, &v, |q, v| forward_acceleration(&p, &s, q, v, &tau));
        let de = (p.energy(&q1, &v1) - p.energy(&q, &v)) / dt;
        let power = v[0] * tau[0] + v[1] * tau[1];
        assert!((de - power).abs() < 1e-4, "{de} vs {power}");
    }
}
