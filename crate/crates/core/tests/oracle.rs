//! Riccati pipeline vs the dense KKT solve on random LQ subproblems.

mod common;

use common::{formulation_opts, instance, oracle_gap, HORIZONS};
use endpoint_ddp::direction::EndpointFactorization;
use endpoint_ddp::riccati::Formulation;
use proptest::prelude::*;

const TOL: f64 = 1e-8;

fn formulation() -> impl Strategy<Value = Formulation> {
    prop_oneof![Just(Formulation::Forward), Just(Formulation::InverseSchur), Just(Formulation::InverseNullspace)]
}

fn endpoint() -> impl Strategy<Value = EndpointFactorization> {
    prop_oneof![
        Just(EndpointFactorization::Schur),
        Just(EndpointFactorization::NullLu),
        Just(EndpointFactorization::NullQr)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn riccati_step_solves_dense_kkt(
        seed in any::<u64>(),
        horizon in prop::sample::select(HORIZONS.to_vec()),
        nx in 1usize..=8,
        nu in 1usize..=4,
        nr_frac in 0.0f64..=1.0,
        formulation in formulation(),
        endpoint in endpoint(),
    ) {
        let lq = instance(seed, horizon, nx, nu, formulation, nr_frac);
        let gap = oracle_gap(&lq, &formulation_opts(formulation, endpoint)).unwrap();
        prop_assert!(gap.residual <= TOL, "residual {:e}", gap.residual);
        prop_assert!(gap.primal <= TOL, "primal {:e}", gap.primal);
        prop_assert!(gap.dual <= TOL, "multipliers {:e}", gap.dual);
    }

    /// Without an endpoint constraint all endpoint routes coincide.
    #[test]
    fn free_endpoint_ignores_factorization(seed in any::<u64>(), nx in 1usize..=6, nu in 2usize..=4) {
        let lq = instance(seed, 5, nx, nu, Formulation::InverseNullspace, 0.0);
        prop_assert_eq!(lq.endpoint_dim(), 0);
        let steps: Vec<_> = EndpointFactorization::ALL
            .iter()
            .map(|&e| endpoint_ddp::direction::compute_direction(&lq, 0.0, &formulation_opts(Formulation::InverseNullspace, e)).unwrap().step)
            .collect();
        prop_assert_eq!(&steps[0], &steps[1]);
        prop_assert_eq!(&steps[1], &steps[2]);
    }

    /// The two stagewise eliminations give the same step.
    #[test]
    fn stagewise_eliminations_agree(seed in any::<u64>(), nx in 1usize..=6, nu in 2usize..=4, nr_frac in 0.0f64..=1.0) {
        let lq = instance(seed, 5, nx, nu, Formulation::InverseNullspace, nr_frac);
        let a = endpoint_ddp::direction::compute_direction(&lq, 0.0, &formulation_opts(Formulation::InverseSchur, EndpointFactorization::NullQr)).unwrap();
        let b = endpoint_ddp::direction::compute_direction(&lq, 0.0, &formulation_opts(Formulation::InverseNullspace, EndpointFactorization::NullQr)).unwrap();
        for (x, y) in a.step.du.iter().zip(&b.step.du) {
            prop_assert!((x - y).amax() <= TOL * (1.0 + y.amax()));
        }
    }
}

#[test]
fn every_horizon_and_formulation_is_covered() {
    for &n in &HORIZONS {
        for f in [Formulation::Forward, Formulation::InverseSchur, Formulation::InverseNullspace] {
            for e in EndpointFactorization::ALL {
                let lq = instance(n as u64 * 31 + 7, n, 8, 4, f, 1.0);
                assert_eq!(lq.endpoint_dim(), 8.min(n * lq.stages[0].control_dim().saturating_sub(lq.stages[0].constraint_dim())));
                let gap = oracle_gap(&lq, &formulation_opts(f, e)).unwrap();
                assert!(gap.residual <= TOL && gap.primal <= TOL, "{n} {f:?} {e:?}: {gap:?}");
            }
        }
    }
}
