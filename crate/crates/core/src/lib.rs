//! Survival dose-response estimation for continuous treatments.
//!
//! The pipeline simulates cohorts with known truth ([`sim`]), estimates the
//! generalized propensity score by orthonormal-basis conditional density
//! estimation ([`gps`]), fits ensembles of recurrent discrete-time hazard
//! models on `(dose, GPS)` ([`survival`]), and turns the resulting survival
//! curves into dose recommendations ([`recommend`]). [`harness`] runs the
//! benchmark experiments and computes the evaluation metrics.

pub mod error;
pub mod rng;
pub mod scalar;
pub mod nn;
pub mod sim;
pub mod stats;
pub mod gps;
pub mod survival;
pub mod recommend;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network = nn::Network<f64>;
pub type NetworkF32 = nn::Network<f32>;
pub type GpsEnsemble = gps::GpsEnsemble<f64>;
pub type GpsEnsembleF32 = gps::GpsEnsemble<f32>;
