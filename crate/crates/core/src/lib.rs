pub mod angular;
pub mod atomic;
pub mod error;

pub use error::{Error, Result};
pub mod probe;
pub mod geometry;
pub mod quadrature;
pub mod pumping;
pub mod dynamics;
pub mod rng;
pub mod trajectories;
pub mod analysis;
pub mod config;
pub mod oracle;
pub mod pipeline;
