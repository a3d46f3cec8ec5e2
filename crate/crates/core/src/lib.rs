//! Responsibility allocation for multi-agent safety filters.
//!
//! Agents share a control barrier function (CBF) constraint; a responsibility
//! vector `γ` on the simplex weights how strongly each agent resists deviating
//! from its desired control. This crate solves the responsibility-weighted
//! filter QP, differentiates it with respect to `γ`, and fits constant or
//! state-dependent (optionally permutation-symmetric) responsibility models to
//! interaction data by gradient descent through the filter.

pub mod analysis;
pub mod cbf;
pub mod datasets;
pub mod dynamics;
pub mod filter;
pub mod models;
pub mod setup;
pub mod training;

use thiserror::Error;

/// Errors raised when the crate's components are wired together.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Cbf(#[from] cbf::CbfError),
    #[error(transparent)]
    Filter(#[from] filter::FilterError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Dataset(#[from] datasets::DatasetError),
    #[error("invalid configuration: {0}")]
    Config(String),
}
