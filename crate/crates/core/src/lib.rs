//! Numerical laboratory for benign overfitting in a single-head softmax
//! attention model trained on two-token signal/noise sequences.
//!
//! The crate covers data generation ([`dataset`]), the reduced model
//! ([`model`]), gradient descent ([`training`]), hard-margin and joint
//! max-margin solvers ([`maxmargin`]), theorem-style checks ([`analysis`])
//! and the configuration-driven experiment runner ([`experiment`]).

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod maxmargin;
pub mod model;
pub mod rng;
pub mod training;

pub use dataset::{Dataset, Label, Sample, SignalMode, SignalPair, Slot};
pub use error::{Error, Result};
pub use model::{ModelParams, Decomposition};
pub use training::{gd_run, GdConfig, Trajectory, TrajectoryRecord};
