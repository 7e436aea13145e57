//! Endpoint-explicit differential dynamic programming.
//!
//! Two coupled Riccati sweeps solve the Newton step of an optimal-control
//! problem with an explicit (possibly rank-deficient) endpoint equality
//! constraint: an endpoint-independent sweep (`riccati::hat`), an
//! endpoint-dependent sweep seeded with the endpoint Jacobian
//! (`riccati::check`), and a small dense solve for the endpoint multiplier
//! (`direction`). `saddle` is the dense oracle everything is tested against.

pub mod direction;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod problems;
pub mod riccati;
pub mod saddle;
pub mod solver;

pub use error::{Error, Result};
