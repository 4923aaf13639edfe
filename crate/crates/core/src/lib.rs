//! Bayesian hierarchical trend estimation from fragmentary study summaries.

pub mod diagnostics;
pub mod error;
pub mod geo_data;
pub mod gmrf;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod scalar;
pub mod validation;

pub use error::{Error, IngestError, IngestErrorKind, LinalgError, Result};
pub use scalar::Scalar;

/// Working precision of the model and sampler.
pub type Real = f64;
pub type Matrix = linalg::DenseMatrix<Real>;
pub type Rw2 = gmrf::Rw2Precision<Real>;
