//! Out-of-distribution detection from intermediate-layer free energies.
//!
//! Every tapped layer of a classifier is reduced to a single free-energy
//! value. The resulting per-sample energy vectors are scored directly
//! (per-layer energy, best-hidden-layer oracle), aggregated (Mahalanobis,
//! k-nearest-neighbour, VAE reconstruction error) or shaped during training
//! with a hinge penalty on every hidden layer.
//!
//! Numeric code in [`energy`], [`metrics`], [`nn`] and [`training`] is
//! generic over [`Scalar`]; the aliases below fix the common choices.

mod binio;
pub mod cli;
pub mod data;
pub mod detectors;
pub mod energy;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod training;

pub use binio::FormatError;
pub use scalar::Scalar;

/// Classifier with `f64` parameters.
pub type Net = nn::LayeredNet<f64>;
/// Classifier with `f32` parameters.
pub type NetF32 = nn::LayeredNet<f32>;
/// Variational autoencoder with `f64` parameters.
pub type Vae = nn::Vae<f64>;
/// Forward trace of an `f64` classifier.
pub type Trace = nn::ForwardTrace<f64>;
/// Scored split with `f64` scores.
pub type Split = metrics::ScoredSplit<f64>;
/// Scored split with `f32` scores.
pub type SplitF32 = metrics::ScoredSplit<f32>;
