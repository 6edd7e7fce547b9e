//! Residual-reweighted, graph-structured Mondrian conformal prediction for
//! graph neural networks.
//!
//! The pipeline: build or load a [`graph::Graph`], partition its targets with
//! [`graph::split_targets`], detect communities with [`community::louvain`],
//! cross-train a triple-quantile [`models::ConformalGnn`] against a
//! [`models::ResidualGnn`] ([`training::cross_train`]), turn calibration
//! residuals into cluster-conditional quantiles ([`conformal`]), and report
//! coverage/inefficiency/worst-slice coverage ([`metrics`]). [`experiment`]
//! drives the whole thing from a JSON config.

pub mod community;
pub mod conformal;
pub mod data;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod training;
