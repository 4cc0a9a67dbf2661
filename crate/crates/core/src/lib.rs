//! Outdoor vision-and-language navigation workbench.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod fixtures;
pub mod graph;
pub mod metrics;
pub mod navigator;
pub mod pipeline;
pub mod speaker;

pub use graph::{rollout, Action, AgentState, GraphError, NavGraph, PanoId, Trajectory};
pub use metrics::{MetricConfig, MetricReport, SampleMetrics};
pub mod text;
