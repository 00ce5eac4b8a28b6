//! Capacity allocation analysis for linearized architectures.
//!
//! Given a stationary Gaussian-process prediction task ([`covkit`]) and a
//! parametrized linear model ([`archzoo`]), the crate finds an optimal model
//! ([`optim`]), extracts the constraint subspace imposed by optimality and
//! measures how the model's effective parameters are allocated across input
//! subspaces ([`capacity`]). [`featurespace`] repeats the analysis in the
//! space of fixed componentwise feature maps, and [`experiment`] runs
//! declarative experiments that emit CSV and JSON.

pub mod archzoo;
pub mod capacity;
pub mod config;
pub mod covkit;
pub mod experiment;
pub mod featurespace;
pub mod linalg;
pub mod optim;
pub mod validate;
