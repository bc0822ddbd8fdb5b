//! Influence-preserving low-rank proxies for gradient-based training data selection.
//!
//! A trained network is compressed layer by layer with a curvature-weighted
//! SVD so that per-sample gradient geometry survives the rank reduction, then
//! refined by aligning its factor gradients with the original model's. The
//! proxy scores candidate training samples with TracIn or K-FAC influence
//! functions at a fraction of the cost of the full model.

pub mod error;
pub mod linalg;
pub mod nn;
pub mod data;
pub mod seed;
pub mod compress;
pub mod influence;
pub mod metrics;
pub mod align;
pub mod select;

pub use error::{Error, Result};
