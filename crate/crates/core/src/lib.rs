//! Open-system model of a cavity-coupled quantum dot driven towards single
//! photon emission, with optional threshold-triggered pump switching.

pub mod algebra;
pub mod error;
pub mod generator;
pub mod observables;
pub mod optimize;
pub mod propagate;
pub mod rates;
pub mod reference;
pub mod reproduce;

pub use error::{Error, Result};
pub use propagate::DensityState;
