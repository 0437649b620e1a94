//! Monte Carlo toolkit for stochastic control of SDEs whose drift has a
//! bounded-variation spatial component.

pub mod adjoint;
pub mod checks;
pub mod corridor;
pub mod drift;
pub mod error;
pub mod experiment;
pub mod io;
pub mod local_time;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod variation;

pub use error::{Error, Result};
