#![allow(dead_code)]

use endpoint_ddp::direction::{compute_direction, DirectionOptions, EndpointFactorization};
use endpoint_ddp::model::{assemble_dense_kkt, Iterate, LqApproximation};
use endpoint_ddp::problems::lq::{random_lq, RandomLqDims};
use endpoint_ddp::riccati::Formulation;
use endpoint_ddp::saddle::solve_kkt_dense;
use endpoint_ddp::Result;

pub const HORIZONS: [usize; 3] = [1, 5, 20];

/// Relative KKT residual of the Riccati step and its distance to the dense
/// solution (both scaled by `1 + ‖·‖∞` of the reference quantity).
#[derive(Clone, Copy, Debug)]
pub struct OracleGap {
    pub residual: f64,
    pub primal: f64,
    pub dual: f64,
}

pub fn oracle_gap(lq: &LqApproximation, opts: &DirectionOptions) -> Result<OracleGap> {
    let dir = compute_direction(lq, 0.0, opts)?;
    let (sys, layout) = assemble_dense_kkt(lq);
    let (w, y) = dir.step.pack(&layout);
    let dense = solve_kkt_dense(&sys)?;
    let scale = 1.0 + sys.rhs.amax().max(sys.constraint_rhs.amax());
    let mut primal = 0.0_f64;
    for off in layout.dx.iter().map(|&o| (o, lq.state_dim())).chain(
        layout.du.iter().zip(&lq.stages).map(|(&o, s)| (o, s.control_dim())),
    ) {
        let d = (w.rows(off.0, off.1) - dense.w.rows(off.0, off.1)).amax();
        primal = primal.max(d);
    }
    Ok(OracleGap {
        residual: sys.residual(&w, &y) / scale,
        primal: primal / (1.0 + dense.w.amax()),
        dual: (&w - &dense.w).amax() / (1.0 + dense.w.amax()),
    })
}

pub fn formulation_opts(formulation: Formulation, endpoint: EndpointFactorization) -> DirectionOptions {
    DirectionOptions { formulation, endpoint, fallback: false, ..DirectionOptions::default() }
}

/// Random instance; stagewise rows only for the inverse formulations.
pub fn instance(seed: u64, horizon: usize, nx: usize, nu: usize, formulation: Formulation, nr_frac: f64) -> LqApproximation {
    let (nu, nh) = match formulation {
        Formulation::Forward => (nu, 0),
        _ => {
            let nu = nu.max(2);
            (nu, 1 + seed as usize % (nu - 1))
        }
    };
    let mut dims = RandomLqDims { horizon, state_dim: nx, control_dim: nu, constraint_dim: nh, endpoint_dim: 0 };
    dims.endpoint_dim = (nr_frac * dims.max_endpoint_dim() as f64).round() as usize;
    random_lq(seed, dims)
}

pub fn max_trajectory_gap(a: &Iterate, b: &Iterate) -> f64 {
    let d = |p: &[nalgebra::DVector<f64>], q: &[nalgebra::DVector<f64>]| {
        p.iter().zip(q).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max)
    };
    d(&a.xs, &b.xs).max(d(&a.us, &b.us))
}
