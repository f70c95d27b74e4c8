//! Collaborative Kalman filtering.
//!
//! Dynamic matrix factorization in which every user's latent factor vector is
//! the state of a linear-Gaussian dynamical system and the item factor matrix
//! acts as a shared measurement dictionary. Per-user Kalman filters and RTS
//! smoothers run independently given the parameters; the parameters
//! (transition matrix, item factors, noise variances) are learned by EM.
//!
//! Module map:
//!
//! - [`model`]: problem sizes, sparse observations, parameters, model files.
//! - [`kalman`]: forward filter, backward smoother, lag-one covariances.
//! - [`em`]: sufficient statistics, closed-form M-step, the EM loop.
//! - [`datagen`]: seeded synthetic data with full latent ground truth.
//! - [`eval`]: prediction, Procrustes alignment, RMSE metrics, static MF baseline.
//! - [`io`]: comma-separated and binary file formats.
//! - [`cli`]: the `ckf` command-line front end.

pub mod cli;
pub mod datagen;
pub mod em;
pub mod eval;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod model;

pub use datagen::{generate, GenConfig, GroundTruth};
pub use em::{run_em, EmConfig, EmFit, EmTrace, SufficientStats, UpdateSet};
pub use kalman::{smooth_all, FilterTrace, SmoothedPosterior};
pub use model::{Covariance, Dims, ModelParams, Observation, ObservationSet};
