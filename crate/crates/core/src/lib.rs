//! Metric-learning toolkit for user-defined keyword spotting.
//!
//! The pipeline: filter a force-aligned keyword manifest by character error
//! rate, extract MFCC features, train a small embedding network in two
//! stages (large out-of-domain inventory, then in-domain classes) with
//! softmax, AM-softmax or angular prototypical losses, enroll unseen
//! keywords from a few examples as centroid prototypes, and score detection
//! trials (EER, FRR at fixed FAR, DET curve, F1, accuracy).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common double-precision instantiations.

pub mod batching;
pub mod cli;
pub mod dataset;
pub mod embedder;
pub mod enrollment;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod numcore;
pub mod scalar;
pub mod synthetic;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector64 = numcore::Vector<f64>;
pub type Vector32 = numcore::Vector<f32>;
pub type Matrix64 = numcore::Matrix<f64>;
/// Frames x coefficients MFCC matrix.
pub type FeatureMatrix = numcore::Matrix<f64>;
pub type ClassifierParams64 = losses::ClassifierParams<f64>;
pub type ApParams64 = losses::ApParams<f64>;
pub type Embedder64 = embedder::Embedder<f64>;
pub type Embedder32 = embedder::Embedder<f32>;
pub type Prototype64 = enrollment::Prototype<f64>;
