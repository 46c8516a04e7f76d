//! Electro-hemodynamic ECG/PPG simulation, simulator fitting, latent loss
//! suite, closed-form latent rectified flow and evaluation metrics.

pub mod dataio;
pub mod error;
pub mod fit;
pub mod flow;
pub mod integrate;
pub mod latentlosses;
pub mod metrics;
pub mod signal;
pub mod simcore;

pub use error::{Error, Result};
