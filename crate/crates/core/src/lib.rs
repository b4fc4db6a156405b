//! Compressed distributed SGD workbench: PowerSGD and Top-K compression with
//! error feedback, a deterministic data-parallel simulator, and the
//! gradient-inversion and membership-inference attacks run against it.

pub mod attacks;
pub mod compressors;
pub mod distsim;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod seed;
