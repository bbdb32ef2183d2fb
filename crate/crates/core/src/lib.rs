//! Physiological-model-based neural network for estimating heart rate from
//! oxygen uptake, together with the baselines and tooling needed to compare
//! it against a plain network and a directly fitted ODE model.
//!
//! The usual flow is [`signal`] (parse, resample, filter) →
//! [`experiment::split_by_activity`] → [`training`] (PMB-NN, FCNN, PM) →
//! [`stats`] / [`report`].

pub mod error;
pub mod experiment;
pub mod lbfgs;
pub mod nn;
pub mod physio;
pub mod report;
pub mod signal;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
