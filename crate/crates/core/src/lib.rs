//! Dense relative localization as an auxiliary loss for small vision
//! transformers, on top of a self-contained f64 autodiff core.

pub mod check;
pub mod config;
pub mod data;
pub mod drloc;
pub mod error;
pub mod grid;
pub mod numcore;
pub mod plot;
pub mod rng;
pub mod sweep;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
