//! Numerical toolkit for stochastic sign fast diffusion with linear
//! multiplicative noise on bounded domains: regularized implicit solvers,
//! finite-time extinction detection and the a priori bounds that predict it.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimates;
pub mod grid;
pub mod linalg;
pub mod noise;
pub mod regularize;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{GridFunction, SpatialGrid};
pub use noise::{BrownianPath, NoiseBasis, Profile};
pub use regularize::RegParams;
