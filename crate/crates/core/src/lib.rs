//! Double machine learning for the partially linear regression model
//! `Y = theta0 D + g0(X) + eps`, `D = m0(X) + nu`, with confounders spread over
//! several modalities.
//!
//! The crate bundles a semi-synthetic confounded-data generator ([`dgp`]),
//! nuisance learners including a middle-fusion network trained on the product
//! of root mean squared errors ([`learners`]), the orthogonal-score estimator
//! ([`dml`]) and an evaluation harness ([`eval`]).
//!
//! All numerics are generic over [`Scalar`]; the aliases below fix `f64`.

pub mod dgp;
pub mod dml;
pub mod error;
pub mod eval;
pub mod io;
pub mod learners;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type Dataset = model::SemiSynthDataset<f64>;
pub type Oracle = model::OracleColumns<f64>;
pub type Predictions = model::NuisancePredictions<f64>;
pub type Estimate = model::EffectEstimate<f64>;
pub type FusionNet = learners::fusion::FusionNet<f64>;
pub type FittedLearner = learners::FittedLearner<f64>;
pub type OracleBounds = dgp::OracleBounds<f64>;
