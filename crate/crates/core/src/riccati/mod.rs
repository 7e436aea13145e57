//! The two backward sweeps: `hat` (endpoint-independent, carries the gaps and
//! gradients) and `check` (endpoint-dependent, seeded with the endpoint
//! Jacobian and reusing the factorizations retained by `hat`).

pub mod check;
pub mod hat;

pub use check::{backward_pass_check, rollout_check, CheckDirection, CheckPolicy, CheckValueModel};
pub use hat::{
    backward_pass_hat, policy_forward, policy_inverse_nullspace, policy_inverse_schur, rollout_hat, Formulation,
    HatDirection, HatPolicy, HatValueModel, StagePolicy, SweepOptions,
};
