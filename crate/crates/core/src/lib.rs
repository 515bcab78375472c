//! Calibrated confidence intervals and regions for random-effects
//! meta-analysis.
//!
//! Likelihood-ratio tests are calibrated by Monte Carlo conditioning on the
//! constrained maximum-likelihood estimate of the nuisance parameters and
//! inverted into intervals ([`mc`]). Models: univariate ([`univariate`]),
//! bivariate diagnostic accuracy ([`bivariate`]) and contrast-based network
//! meta-analysis ([`network`]). Standard comparator methods live in
//! [`comparators`]; data generators and the coverage harness in [`sim`].

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bivariate;
pub mod comparators;
pub mod error;
pub mod io;
pub mod mc;
pub mod network;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod univariate;

pub use error::{Error, Result};
