//! Exemplar-free continual learning with a shared prototype layer.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod optim;
pub mod persist;
pub mod registry;
pub mod run;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
