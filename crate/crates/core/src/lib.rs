//! Scheduling, simulation and strategy planning for tensor-model-parallel
//! transformer training with activation recomputation.

pub mod config;
pub mod costs;
pub mod error;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod presets;
pub mod report;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
