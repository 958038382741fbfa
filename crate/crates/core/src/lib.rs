//! Neural saddle-point solvers for optimal transport and martingale optimal
//! transport, with entropic and linear-programming reference solvers.

pub mod acceptance;
pub mod anomaly;
pub mod config;
pub mod costs;
pub mod entropic;
pub mod error;
pub mod experiment;
pub mod lp;
pub mod measures;
pub mod neuralnet;
pub mod saddle;

pub use error::{Error, Result};
