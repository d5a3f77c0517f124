//! Hybrid offline/online parameter tuning for tiered-memory systems.

pub mod artifact;
pub mod backend;
pub mod catalog;
pub mod cluster;
pub mod collector;
pub mod controller;
pub mod db;
pub mod rl;
pub mod sim;
pub mod space;
pub mod state;

pub use catalog::Catalog;
pub use db::{DataPoint, PerfDatabase};
pub use space::{ParamConfig, ParamSpace, ParamSpec};
pub use state::{weighted_distance, FeatureWeights, IpcBounds, WorkloadState};
