//! Differentially private partition selection.
//!
//! Users hold sets of items; the goal is to release as many items of the
//! union as possible under user-level (ε, δ)-differential privacy. Every
//! algorithm here follows the same weight-and-threshold shape: bound each
//! user's contribution, weight the items, add Gaussian noise, and release the
//! items above a threshold that also covers the items only one user holds.
//!
//! * [`weighters`] holds the parallel weighters (`Basic` and the adaptive
//!   `MAD` weighting with its biased per-user allocation).
//! * [`pipeline`] runs one weight-and-threshold round.
//! * [`two_round`] runs the two-round adaptive algorithm and DP-SIPS.
//! * [`baselines`] holds the sequential PolicyGaussian and GreedyUpdate weighters.
//! * [`verify`] checks the sensitivity bounds, the dominance guarantee and the
//!   threshold calibration empirically.

pub mod baselines;
pub mod calibration;
pub mod coverage;
pub mod engine;
pub mod error;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod two_round;
pub mod verify;
pub mod weighters;

pub use calibration::{calibrate, compute_rho, solve_sigma, CalibrationParams, SensitivityProfile};
pub use error::{Error, Result};
pub use model::{
    observed_union, AdaptiveConfig, BiasClamp, BiasMap, ItemId, PrivacyBudget, RunMetrics, SelectionResult, UserSets,
    WeightMap,
};
pub use pipeline::{weight_and_threshold, PipelineConfig, Weighter};
pub use rng::{Purpose, RunSeed};
pub use two_round::{dp_sips, mad2r, Mad2rConfig, RoundBudgetSplit};
