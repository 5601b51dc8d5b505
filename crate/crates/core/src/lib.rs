//! Gradient-guided annealing for multi-domain training on small models.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`]: poly-logistic and MLP classifiers with exact gradients.
//! * [`data`]: synthetic multi-domain datasets and composite minibatches.
//! * [`metrics`]: per-domain gradients and pairwise cosine similarity.
//! * [`optim`]: SGD, Adam, annealing search and the noisy-update variant.
//! * [`harness`]: training loops, protocols and sweeps.
//! * [`experiment`]: the experiment-file schema driven by the CLI.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod telemetry;

pub use error::{LabError, Result};
pub use model::{build_model, Activation, Model, ModelFamily, ModelSpec};
pub use params::ParamVector;
