pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod models;
pub mod nets;
pub mod par;
pub mod physics;
pub mod rng;
pub mod system;
pub mod training;

pub use error::{Error, Result};
