//! Identification and estimation with an excluded-but-endogenous instrument
//! `Z` and an exogenous-but-included instrument `W`.
//!
//! Three model families are covered: a quantile model with rank invariance
//! ([`quantile_solver`]), an additive model ([`additive`]), and a binary
//! treatment model with local irrelevance ([`late`]). Every family has a
//! synthetic generator in [`dgp`] that doubles as the ground-truth oracle.

pub mod additive;
pub mod data;
pub mod dgp;
pub mod error;
pub mod late;
pub mod linalg;
pub mod montecarlo;
pub mod normal;
pub mod pwl;
pub mod quantile_solver;
pub mod relevance;

pub use data::{Dataset, Row, Supports};
pub use error::{Error, Result};
