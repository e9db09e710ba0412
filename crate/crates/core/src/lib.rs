//! Targeted doubly robust estimation and collaborative learning for
//! debiased recommendation.
//!
//! The estimator kernels live in [`estimators`] and [`targeting`];
//! [`synthgen`] and [`mclab`] build the semi-synthetic and Monte-Carlo
//! worlds they are evaluated on; [`models`] and [`training`] implement the
//! matrix-factorization trainers; [`commands`] ties everything into the
//! experiment runner used by the `tdr` binary.

pub mod commands;
pub mod datasets;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod mclab;
pub mod metrics;
pub mod models;
pub mod synthgen;
pub mod targeting;
pub mod training;

pub use domain::{InteractionTable, PairSpace, PropensityField, SeededRng, Stream};
pub use error::{Error, Result};
pub use estimators::{Estimator, LossInputs};
pub use targeting::{ImputationState, ResidualMode, TargetingResult};
