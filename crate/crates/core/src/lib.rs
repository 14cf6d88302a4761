//! Core library for wildflow: spatiotemporal event-risk forecasting from
//! ranger patrol records with imperfect detection.
//!
//! The crate is organised bottom-up:
//! - [`tensor`], [`tape`], [`optim`], [`gradcheck`]: a small dense autodiff
//!   stack sized for the models in this project.
//! - [`data`]: grid graphs, monthly panels, visit logs, CSV round-trips.
//! - [`synth`]: synthetic park generator with known ground truth.
//! - [`occupancy`]: detection-aware likelihoods.
//! - [`models`]: graph encoder, linear base, detection head, velocity field.
//! - [`flow`]: composite-base flow matching and ODE risk sampling.
//! - [`train`] / [`eval`]: training recipes, metrics, reports, case studies.

pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod models;
pub mod occupancy;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
