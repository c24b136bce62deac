pub mod error;
pub mod grad;
pub mod minnorm;
pub mod rng;

pub use error::{Error, Result};
pub mod aggregators;
pub mod diagnostics;
pub mod net;
pub mod tasks;
pub mod trainer;
pub mod verify;
