//! Delay-adaptive predictor feedback for nonlinear systems with unknown input delay.
//!
//! The crate provides plant models, a control-history buffer realizing the
//! transport-PDE actuator state, numerical and neural-operator predictors,
//! delay update laws, a closed-loop simulator, dataset generation and a
//! latency benchmark.

pub mod adaptation;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod history;
pub mod neural;
pub mod predictor;
pub mod simulation;
pub mod verify;
pub mod systems;

pub use error::{Error, Result};
