//! Monte Carlo laboratory for backward stochastic differential equations.
//!
//! The crate is organised bottom-up:
//!
//! - [`paths`]: time grids, seeded Brownian ensembles, discrete Itô sums and
//!   stochastic exponentials.
//! - [`market`]: the bond/stock market, risk premium, deflators and the
//!   risk-neutral reweighting.
//! - [`regression`]: least-squares conditional expectations on path ensembles.
//! - [`bsde`]: linear (adjoint-process) solver, explicit backward Euler,
//!   Picard iteration, residuals, supersolutions and a priori bounds.
//! - [`concave`]: polar (conjugate) drivers, linear control families and the
//!   essential-infimum envelope.
//! - [`pricing`]: complete-market pricing and hedging, risk-neutral pricing
//!   and the higher-borrowing-rate market (primal and dual).
//! - [`utility`]: constrained logarithmic utility maximisation.
//! - [`cli`] and [`validation`]: the experiment runner behind the `bsdelab`
//!   binary.

// Negated float comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod cli;
pub mod concave;
pub mod error;
pub mod linalg;
pub mod market;
pub mod paths;
pub mod pricing;
pub mod regression;
pub mod stats;
pub mod utility;
pub mod validation;

pub use error::{Error, Result};
