pub mod balls;
pub mod diff;
pub mod harmonium;
pub mod error;
pub mod kalman;
pub mod linalg;
pub mod ppc;
pub mod rng;
pub mod rvae;
pub mod seq;

pub use error::{Error, Result};
