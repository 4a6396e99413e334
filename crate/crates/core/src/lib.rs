//! Molecular communication receiver toolkit.
//!
//! * [`chem`]: species, mass-action reactions, ligand-receptor circuits.
//! * [`rdme`]: voxel reaction-diffusion CTMP and its exact SSA.
//! * [`filtergen`]: reaction graph and Bayesian filter terms for any circuit
//!   and any choice of measured species.
//! * [`demod`]: symbol-conditioned moment tables and the MAP demodulation filters.
//! * [`oracle`]: uniformization and brute-force checks used to validate the above.
//! * [`harness`]: experiment configuration, SER Monte Carlo and sweeps.

pub mod chem;
pub mod demod;
pub mod filtergen;
pub mod harness;
pub mod oracle;
pub mod rdme;
pub mod rng;
pub mod stats;
