//! Duplicated (rank-deficient but consistent) endpoint and stagewise rows.

mod common;

use common::{formulation_opts, instance, max_trajectory_gap};
use endpoint_ddp::direction::{compute_direction, EndpointFactorization};
use endpoint_ddp::problems::lq::{duplicate_lq_endpoint, duplicate_lq_stagewise};
use endpoint_ddp::problems::{build, cold_start, duplicate_endpoint, duplicate_stagewise, ProblemSpec};
use endpoint_ddp::riccati::Formulation;
use endpoint_ddp::solver::{solve, SolverOptions, Status};
use endpoint_ddp::Error;
use proptest::prelude::*;

const TOL: f64 = 1e-8;
const NULLSPACE: [EndpointFactorization; 2] = [EndpointFactorization::NullLu, EndpointFactorization::NullQr];

fn opts(endpoint: EndpointFactorization) -> SolverOptions {
    SolverOptions { endpoint, fallback: false, ..SolverOptions::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn duplicated_endpoint_rows_leave_step_unchanged(seed in any::<u64>(), times in 2usize..=3, nx in 2usize..=6, nu in 1usize..=3) {
        let lq = instance(seed, 5, nx, nu, Formulation::Forward, 1.0);
        prop_assume!(lq.endpoint_dim() > 0);
        let dup = duplicate_lq_endpoint(&lq, times);
        for e in NULLSPACE {
            let o = formulation_opts(Formulation::Forward, e);
            let a = compute_direction(&lq, 0.0, &o).unwrap().step;
            let b = compute_direction(&dup, 0.0, &o).unwrap().step;
            for (x, y) in a.dx.iter().zip(&b.dx).chain(a.du.iter().zip(&b.du)) {
                prop_assert!((x - y).amax() <= TOL * (1.0 + x.amax()));
            }
            // the single-row multiplier is split across the copies
            let summed = (0..lq.endpoint_dim()).map(|i| (0..times).map(|t| b.endpoint_multiplier[i + t * lq.endpoint_dim()]).sum::<f64>());
            for (s, a) in summed.zip(a.endpoint_multiplier.iter()) {
                prop_assert!((s - a).abs() <= TOL * (1.0 + a.abs()));
            }
        }
        let schur = compute_direction(&dup, 0.0, &formulation_opts(Formulation::Forward, EndpointFactorization::Schur));
        prop_assert_eq!(schur.unwrap_err(), Error::SingularEndpointOperator);
    }

    #[test]
    fn duplicated_stagewise_rows_leave_step_unchanged(seed in any::<u64>(), nx in 1usize..=6, nu in 2usize..=4, nr_frac in 0.0f64..=1.0) {
        let lq = instance(seed, 5, nx, nu, Formulation::InverseNullspace, nr_frac);
        let dup = duplicate_lq_stagewise(&lq, 2);
        let o = formulation_opts(Formulation::InverseNullspace, EndpointFactorization::NullQr);
        let a = compute_direction(&lq, 0.0, &o).unwrap().step;
        let b = compute_direction(&dup, 0.0, &o).unwrap().step;
        for (x, y) in a.dx.iter().zip(&b.dx).chain(a.du.iter().zip(&b.du)) {
            prop_assert!((x - y).amax() <= TOL * (1.0 + x.amax()));
        }
        let schur = compute_direction(&dup, 0.0, &formulation_opts(Formulation::InverseSchur, EndpointFactorization::NullQr));
        prop_assert!(matches!(schur, Err(Error::SingularConstraintBlock { .. })), "{:?}", schur.err());
    }
}

#[test]
fn lqr_with_duplicated_endpoint_converges_to_same_trajectory() {
    let base = build(&ProblemSpec::new("lqr")).unwrap();
    let dup = duplicate_endpoint(&base, 2).unwrap();
    assert_eq!(dup.endpoint_dim(), 2 * base.endpoint_dim());
    let (xs, us) = cold_start(&base, 3, 0.1);
    let (reference, _) = solve(&base, &xs, &us, &opts(EndpointFactorization::Schur)).unwrap();
    for e in NULLSPACE {
        let (it, stats) = solve(&dup, &xs, &us, &opts(e)).unwrap();
        assert_eq!(stats.status, Status::Converged);
        assert_eq!(stats.iterations, 1);
        assert!(max_trajectory_gap(&it, &reference) <= TOL, "{e:?}");
    }
    assert_eq!(solve(&dup, &xs, &us, &opts(EndpointFactorization::Schur)).unwrap_err(), Error::SingularEndpointOperator);
}

#[test]
fn lqr_inverse_with_duplicated_stagewise_rows_converges_to_same_trajectory() {
    let base = build(&ProblemSpec::new("lqr-inverse")).unwrap();
    let dup = duplicate_stagewise(&base, 2).unwrap();
    let (xs, us) = cold_start(&base, 4, 0.1);
    let (reference, _) = solve(&base, &xs, &us, &SolverOptions::default()).unwrap();
    let (it, stats) = solve(&dup, &xs, &us, &SolverOptions::default()).unwrap();
    assert_eq!(stats.status, Status::Converged);
    assert!(max_trajectory_gap(&it, &reference) <= TOL);
}

#[test]
fn spec_level_duplication_matches_helpers() {
    let mut spec = ProblemSpec::new("lqr");
    spec.duplicate_endpoint = 3;
    assert_eq!(build(&spec).unwrap().endpoint_dim(), 12);
    let mut spec = ProblemSpec::new("point-mass-inverse");
    spec.duplicate_stagewise = 2;
    let p = build(&spec).unwrap();
    let single = build(&ProblemSpec::new("point-mass-inverse")).unwrap();
    assert_eq!(p.stages[0].constraint_dim(), 2 * single.stages[0].constraint_dim());
}

#[test]
fn single_copy_is_rejected() {
    let p = build(&ProblemSpec::new("lqr")).unwrap();
    assert!(matches!(duplicate_endpoint(&p, 1), Err(Error::InvalidOption(_))));
    assert!(matches!(duplicate_stagewise(&p, 1), Err(Error::InvalidOption(_))));
}

#[test]
fn pendulum_with_duplicated_endpoint_converges_to_same_trajectory() {
    let base = build(&ProblemSpec::new("dpend-inverse")).unwrap();
    let dup = duplicate_endpoint(&base, 2).unwrap();
    let (xs, us) = base.constant_guess();
    // The optimum is weakly curved along the trajectory, so the state gap
    // follows the KKT tolerance; tighten it well below the default.
    let o = SolverOptions { tol_kkt: 1e-11, ..opts(EndpointFactorization::NullQr) };
    let (reference, s0) = solve(&base, &xs, &us, &o).unwrap();
    let (it, s1) = solve(&dup, &xs, &us, &o).unwrap();
    assert_eq!((s0.status, s1.status), (Status::Converged, Status::Converged));
    assert!((it.cost - reference.cost).abs() <= TOL * reference.cost);
    let gap = max_trajectory_gap(&it, &reference);
    assert!(gap <= 1e-5, "{gap:e}");
}
