pub mod config;
pub mod data;
pub mod driver;
pub mod error;
pub mod growth;
pub mod mask;
pub mod model;
pub mod par;
pub mod prop1;
pub mod rng;
pub mod runner;
pub mod snapshot;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
