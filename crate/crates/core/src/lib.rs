//! Reduced-order modeling, CPG gait generation and corridor-constrained
//! model predictive control for articulated snake robots.

pub mod cpg;
pub mod error;
pub mod gaits;
pub mod motion_model;
pub mod nmpc;
pub mod robot_model;
pub mod rom;
pub mod scenario_io;
mod serde_vec;

pub use error::{Error, Result};
