//! Bivariate geostatistical modeling under preferential sampling.
//!
//! The sampling locations of point-referenced data are modeled as a
//! log-Gaussian Cox process whose latent intensity field may also enter the
//! response means (a "shared process"), optionally alongside coregionalized
//! Gaussian processes that give the two responses their own dependence
//! structure. This crate provides:
//!
//! - study-region / grid machinery for stochastic-integral approximation
//!   ([`domain`]),
//! - exponential covariance kernels, dense Cholesky assembly and the
//!   closed-form cross-covariance matrices of the model families
//!   ([`covariance`]),
//! - seeded latent-field simulation ([`gp`]) and LGCP likelihoods plus
//!   point-pattern simulation by thinning ([`lgcp`]),
//! - the joint hierarchical models over three sampling scenarios
//!   ([`model`]),
//! - an MCMC engine built on elliptical slice sampling, whitened
//!   hyperparameter moves, Gibbs updates and random-walk Metropolis
//!   ([`mcmc`]),
//! - posterior-predictive co-kriging and cross-covariance dependence
//!   summaries ([`predict`]),
//! - biased holdout construction and RMSE/CRPS scoring ([`score`]),
//! - a config-driven experiment harness behind the `prefsamp` CLI
//!   ([`experiment`]).

pub mod covariance;
pub mod covariates;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod lgcp;
pub mod mcmc;
pub mod model;
pub mod predict;
pub mod rng;
pub mod score;

pub use error::{Error, Result};
