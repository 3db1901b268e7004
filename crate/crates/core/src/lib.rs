//! Linear-quadratic optimal control of conditional McKean–Vlasov dynamics
//! with common noise.

pub mod cli;
pub mod error;
pub mod linalg;
pub mod lqmodel;
pub mod measure;
pub mod policy;
pub mod riccati;
pub mod rng;
pub mod simulator;
pub mod verify;

pub use error::{Error, Result};
