//! Robustness-aware coreset selection for adversarial contrastive learning.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod divergence;
pub mod error;
pub mod losses;
pub mod model;
pub mod par;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use error::{Error, Result};
