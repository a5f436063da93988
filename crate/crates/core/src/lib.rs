//! Longitudinal DINA cognitive-diagnosis models with covariate-driven latent
//! transitions.
//!
//! The crate provides the measurement model ([`model`]), the logistic
//! initial-mastery and transition model ([`structural`]), a synthetic data
//! generator ([`simulate`]), two estimators ([`joint`] for Metropolis-within-Gibbs
//! MCMC and [`stepwise`] for the bias-corrected three-step procedure), evaluation
//! metrics and MCMC diagnostics ([`metrics`]) and a Monte Carlo study runner
//! ([`study`]).
//!
//! The likelihood and structural math is generic over [`Scalar`] (`f32` or
//! `f64`); the estimators and the study harness work in `f64`. Concrete aliases
//! for both precisions are exported below.

pub mod config;
pub mod error;
pub mod joint;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod structural;
pub mod stepwise;
pub mod study;

pub use error::{Error, Result};
pub use model::{AttributeProfile, ProfileIndex, ProfilePanel, QMatrix, ResponsePanel};
pub use scalar::Scalar;

pub type ItemParamsF32 = model::ItemParams<f32>;
pub type ItemParamsF64 = model::ItemParams<f64>;
pub type ProfilePosteriorF32 = model::ProfilePosterior<f32>;
pub type ProfilePosteriorF64 = model::ProfilePosterior<f64>;
pub type StructuralParamsF32 = structural::StructuralParams<f32>;
pub type StructuralParamsF64 = structural::StructuralParams<f64>;
pub type CovariateMatrixF32 = structural::CovariateMatrix<f32>;
pub type CovariateMatrixF64 = structural::CovariateMatrix<f64>;
pub type TransitionMatrixF32 = structural::TransitionMatrix<f32>;
pub type TransitionMatrixF64 = structural::TransitionMatrix<f64>;
pub type CepMatrixF32 = stepwise::CepMatrix<f32>;
pub type CepMatrixF64 = stepwise::CepMatrix<f64>;
