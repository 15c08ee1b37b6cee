//! Two-stage denoising diffusion for 3D spatial vessel graphs.
//!
//! Node coordinates are generated first by a Gaussian diffusion model; edges are
//! then generated by a categorical diffusion model conditioned on the fixed nodes.

pub mod config;
pub mod edgediff;
pub mod error;
pub mod generate;
pub mod manifest;
pub mod graph;
pub mod metrics;
pub mod nets;
pub mod nodediff;
pub mod par;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::SpatialGraph;
