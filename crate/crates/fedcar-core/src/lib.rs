//! Desk-scale federated training of a classifier-as-retriever: a frozen
//! encoder with a trainable soft-embedding adapter and classifier head,
//! trained by federated averaging under local differential privacy, with
//! instrumentation that checks the convergence bounds the design rests on.
//!
//! Module map:
//! - [`params`], [`encoder`], [`model`] — the trainable pipeline and its loss.
//! - [`dp`] — update clipping, calibrated noise, adaptive threshold.
//! - [`fed`] — sharding, local SGD, aggregation, round orchestration.
//! - [`wire`], [`net`] — binary framing and the TCP aggregator/client.
//! - [`eval`] — top-K evaluation and the retrieval-baseline comparison.
//! - [`theory`] — constant estimation and convergence-bound certification.
//! - [`data`], [`config`] — datasets, file formats, run configuration.

pub mod config;
pub mod data;
pub mod dp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fed;
pub mod model;
pub mod net;
pub mod params;
pub mod rng;
pub mod theory;
pub mod wire;

pub use error::{Error, Result};
pub use params::{AdapterParams, ClassifierParams, Gradients, ModelParams, ModelShape, TrainMode};
