//! Adaptive ingestion of JSON record streams into a property graph.

pub mod cli;
pub mod committer;
pub mod controller;
pub mod edge_table;
pub mod mapping;
pub mod metrics;
pub mod predictor;
pub mod stream_source;
pub mod synth;
pub mod telemetry;
