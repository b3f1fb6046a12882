//! Sampling-based inference for M-estimators with non-smooth objectives,
//! and a one-round federated protocol that borrows strength from
//! heterogeneous source sites.
//!
//! The target site draws from the quasi-posterior `exp{−n M_n(θ)}` by
//! random-walk Metropolis, estimates the score variance by perturbing its
//! objective with bootstrap weights, and broadcasts a handful of draws.
//! Each source site regresses its own objective on quadratic features of
//! those draws to obtain a score and curvature at the target estimate,
//! and returns only `O(d²)` summaries. The target then screens sites with
//! a score-type dissimilarity statistic and combines them through an
//! adaptive lasso.

pub mod combiner;
pub mod data;
pub mod defaults;
pub mod error;
pub mod linalg;
pub mod model;
pub mod numeric;
pub mod perturbation;
pub mod protocol;
pub mod rng;
pub mod sampler;
pub mod simlab;
pub mod source_site;

pub use data::Dataset;
pub use error::{Error, Result};
