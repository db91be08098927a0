//! Reaction-diffusion network and compartment-model baselines for
//! time-activity-curve prediction in dynamic image sequences.

pub mod autodiff;
pub mod cli;
pub mod compartment;
pub mod data;
pub mod error;
pub mod evalreport;
pub mod phantom;
pub mod rdnet;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
