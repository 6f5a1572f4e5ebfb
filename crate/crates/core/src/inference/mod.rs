//! Posterior computation for the lattice LGCP.

pub mod fit;
pub mod glm;
pub mod laplace;
pub mod mcmc;
pub mod optim;

pub use fit::{decompose, fit, fit_with, FitOptions, FitResult};
pub use glm::{glm_fit, GlmOptions};
pub use laplace::{laplace_fit, LaplaceEngine, LaplaceFit, LaplaceOptions};
pub use mcmc::{mcmc_chains, mcmc_oracle, McmcOptions, McmcResult};
