//! Multi-task graph learning over annotated spatial point clusters.
//!
//! The pipeline turns a point cluster (point centers, per-point intensity
//! patches, per-point morphology labels, one distribution label) into
//! spatial graphs, runs a two-stream deep GCN with GENConv-style message
//! passing over them, and trains node and graph classification heads
//! jointly with GradNorm-balanced task weights. A seeded synthetic cluster
//! generator provides datasets for training, evaluation, and ablations.

pub mod ablate;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod datasynth;
pub mod eval;
pub mod graphs;
pub mod metrics;
pub mod model;
pub mod multitask;
pub mod reference;
pub mod train;
