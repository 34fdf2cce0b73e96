//! Importance-weighted posteriors.
//!
//! The importance-weighted autoencoder bound can be read as the ordinary
//! evidence lower bound of an implicit, batch-dependent distribution `q̃_IW`,
//! whose average over batches `q_EW` is a normalized density that
//! sampling-importance-resampling draws from exactly. This crate computes the
//! VAE and IWAE bounds, evaluates, renders and samples `q̃_IW` and `q_EW`, and
//! checks the resulting bound ordering against grid quadrature on small
//! targets.
//!
//! Module map:
//! - [`model`]: targets `p(x, z)` and diagonal Gaussian proposals `q(z|x)`
//! - [`weights`]: log-space importance-weight arithmetic
//! - [`bounds`]: `L_VAE`, `L_IWAE` and the bounds of the implicit distributions
//! - [`implicit`]: `q̃_IW`, `q_EW`, SIR sampling and grid rendering
//! - [`oracle`]: grids and quadrature ground truth
//! - [`optim`]: reparameterized gradient ascent on the IWAE bound
//! - [`cli`]: the `iwpost` command-line front end

pub mod bounds;
pub mod cli;
pub mod error;
pub mod field;
pub mod implicit;
pub mod kv;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
pub use field::DensityField;
pub use model::{GaussianProposal, LatentPoint, TargetModel};
pub use oracle::Grid;
pub use rng::RngStream;
