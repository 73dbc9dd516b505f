//! Critical bond percolation on Z^d: cluster sampling, size-conditioned
//! two- and three-point estimators, ISE densities, the Λ_z(k) series and
//! exact small-cluster enumeration.

pub mod config;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod ise;
pub mod lambda;
pub mod lattice;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
