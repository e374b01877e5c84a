//! Bayesian regression markets.
//!
//! A central agent posts a regression task and pays for the predictive
//! improvement that features owned by support agents bring. Revenue is split
//! with exact Shapley values under one of four coalition valuations, in an
//! in-sample and an out-of-sample stage.

pub mod allocation;
pub mod bayes;
pub mod data_io;
pub mod error;
pub mod market;
pub mod scoring;
pub mod simulation;

pub use allocation::MarketDesign;
pub use bayes::{Basis, Dataset, GaussianBelief, Hypothesis, PredictiveDistribution};
pub use error::{Error, Result};
pub use market::{AgentRegistry, ClearingResult, MarketConfig, Stage};
