//! Federated-learning simulator for studying colour perturbations that keep
//! classifier predictions fixed while degrading gradient-based saliency maps.

pub mod attack;
pub mod color;
pub mod config;
pub mod data;
pub mod delta_e;
pub mod error;
pub mod experiments;
pub mod federated;
pub mod image;
pub mod metrics;
pub mod model;
pub mod report;
pub mod saliency;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
