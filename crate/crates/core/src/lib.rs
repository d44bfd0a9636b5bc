//! Mixture-of-Gaussians time series forecasting with uncertainty-based
//! gating, plus its input-gated baselines.
//!
//! Everything trains on [`numgrad`], a small dense-tensor computation graph
//! with reverse-mode differentiation. Forecasting experts ([`experts`]) emit
//! a Gaussian per output cell; the [`mixture`] module combines them under one
//! of three gating/loss regimes and decomposes predictive variance into
//! aleatoric and epistemic parts. [`data`], [`train`] and [`eval`] cover the
//! pipeline around the models: ingestion and windowing, the training loop,
//! and forecast metrics with uncertainty-error correlation diagnostics.

pub mod data;
pub mod eval;
pub mod experts;
pub mod mixture;
pub mod numgrad;
pub mod train;

pub use numgrad::{Graph, GraphError, NodeId, ParamSet, SoftplusBase, Tensor};
