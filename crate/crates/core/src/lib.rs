//! Continual Bayesian optimization for sequences of users.
//!
//! A Monte-Carlo-dropout population network carries knowledge across users.
//! It is retrained after every user on predictions replayed from stored
//! per-user Gaussian processes, keeping only confident predictions. During a
//! user's session its expected-improvement values are blended with those of a
//! user-specific GP, shifting weight toward the GP as observations accumulate.
//!
//! The crate also ships the comparison optimizers and the synthetic-user
//! benchmark harness (shifted and scaled Branin / McCormick users, regret
//! accounting, CSV reports).

pub mod acquisition;
pub mod baselines;
pub mod bench;
pub mod bnn;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod report;
pub mod rng;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// A point in the normalized design space `[0, 1]^d`.
pub type DesignPoint = Vec<f64>;

/// One evaluation of one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: DesignPoint,
    pub y: f64,
}

impl Observation {
    pub fn new(x: DesignPoint, y: f64) -> Self {
        Self { x, y }
    }
}

/// Gaussian belief about the objective at a point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}
