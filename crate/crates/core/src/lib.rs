//! Simulator for three-layer (end/edge/cloud) federated learning with a
//! bidirectional privacy pipeline: L2 clipping, Laplace perturbation,
//! randomized-score top-k subsampling and periodic sign reset, plus a
//! gradient-matching adversary that measures how much the pipeline leaks.

pub mod attack;
pub mod config;
pub mod data;
pub mod engine;
pub mod grad;
pub mod model;
pub mod privacy;
pub mod seed;
pub mod telemetry;
pub mod transport;
