//! Certifiably robust split conformal prediction for Lipschitz-bounded
//! classifiers.
//!
//! The crate covers the whole pipeline: 1-Lipschitz networks built from
//! orthogonal layers and GroupSort activations, nonconformity scores with
//! closed-form bounds over an ℓ2 ball, vanilla and robust calibration,
//! finite-sample coverage audits, calibration-poisoning certificates and a
//! PGD adversary to measure coverage under attack.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod audit;
pub mod conformal;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod lipnet;
pub mod poison;
pub mod rng;
pub mod robust;
pub mod scores;

pub use error::{Error, Result};
