//! Decomposed future-return explanations for controllers in trace-driven network
//! environments.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod predictor;
pub mod rollout;
pub mod sampling;
pub mod scalar;
pub mod suite;
pub mod trace;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the pipeline.
pub type Predictor = predictor::PredictorModel<f64>;
pub type DenseNet64 = nn::DenseNet<f64>;
pub type DecomposedReturn64 = rollout::DecomposedReturn<f64>;
pub type Normalization = rollout::NormalizationSpec<f64>;
