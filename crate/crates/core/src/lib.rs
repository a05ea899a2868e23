//! Density-ratio estimation under covariate shift.
//!
//! The crate covers the whole stack of a covariate-shift pipeline on a
//! controlled Gaussian mean-shift instance:
//!
//! * [`lab`]: the data-generating process and its closed-form references.
//! * [`net`] and [`constraints`]: a positivity-floored ratio network trained
//!   on the LSIF objective under augmented-Lagrangian normalization and
//!   moment constraints, with clipping and tempering variants.
//! * [`diagnostics`] and [`transforms`]: ESS, second moment, `L^2(Q)` error,
//!   post-hoc normalization, clipping, tempering.
//! * [`risk`]: importance-weighted and posterior-averaged risks.
//! * [`certificates`]: square-root and Bernoulli-KL PAC-Bayes bounds, the
//!   geometric-peeling anytime bound, discrete Gibbs posteriors.
//! * [`baselines`]: uLSIF, KLIEP and a logistic discriminator.
//! * [`harness`]: pre-registered stages S0 to S7, tolerance registry,
//!   canonical JSON artifacts and a two-sample CSV mode.

pub mod baselines;
pub mod certificates;
pub mod constraints;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod lab;
pub mod net;
pub mod par;
pub mod risk;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
