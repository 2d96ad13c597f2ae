//! Recovery of transport maps and vector fields from their action on a
//! finite family of probability densities.
//!
//! The crate bundles the numerical pieces (densities, pushforwards, energy
//! MMD, weighted divergence operators, embedding diagnostics, small neural
//! networks) and three recovery experiments built from them: a circle map
//! from pushforwards of von Mises densities, the Lorenz-63 field from density
//! snapshots, and a planar field from weighted divergences.

pub mod config;
pub mod densities;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod transport;

pub use densities::{DensityFamily, DensityModel, Domain};
pub use ensemble::ParticleEnsemble;
pub use error::{Error, Result};
pub use parallel::Exec;
