//! Deep jump Gaussian process surrogates for piecewise continuous functions.
//!
//! Each test location gets its own neighborhood, a locally linear projection
//! `z = W_j (x − x*_j)` whose entries carry a GP prior across locations, and a
//! jump GP on the projected neighborhood. Projections and local models are
//! trained jointly by maximizing a closed-form evidence lower bound; prediction
//! samples projections and refits a jump GP in each sampled subspace.

pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod elbo;
pub mod error;
pub mod io;
pub mod kernels;
pub mod jump_gp;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod predict;
pub mod projection;
pub mod rng;
pub mod stationary_gp;

pub use dataset::Dataset;
pub use error::{Error, Result};
