//! Differentially private estimation of weighted average treatment effects
//! with covariate-balancing scoring rules.

pub mod cbsr;
pub mod error;
pub mod kng;
pub mod model;
pub mod noise;
pub mod sieve;
pub mod sim;
pub mod solve;
pub mod wate;

pub use error::{Error, Result};
pub use model::{CausalDataset, EstimandKind, EstimandSpec, PositivityBound, PrivacyBudget, PrivateEstimate};
