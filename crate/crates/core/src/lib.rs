//! Deterministic desk-scale simulator for federated domain-generalizable
//! person re-identification with camera-invariant prompt anchors and a
//! shared camera-style bank.
//!
//! Modules follow the pipeline: synthetic data, encoders, Phase I anchoring
//! ([`csa`]), style templates ([`gsd`]), the federated loop ([`fedloop`]) and
//! evaluation ([`evalkit`]). [`experiment`] ties them to on-disk artifacts.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod config;
pub mod csa;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod fedloop;
pub mod gsd;
pub mod numerics;
pub mod rng;
pub mod sampling;
pub mod synthdata;

pub use config::{EvalConfig, ExperimentConfig};
pub use csa::{CsaConfig, CsaOutcome};
pub use encoders::{
    Architecture, Checkpoint, ClassifierHead, EncoderParams, ModelConfig, PromptTokens, PrototypeSet,
    TextEncoderSurrogate, TextPrototype,
};
pub use error::{Error, Result};
pub use evalkit::{EvalMetrics, Grid, MarginReport, RetrievalResult};
pub use fedloop::{Anchoring, ClientUpdate, FedConfig, FederationOutcome, RoundReport};
pub use gsd::{GsdConfig, MetadataSetting, ScopeKind, StyleBank, StyleTemplate};
pub use numerics::{ChannelStats, GradCheckReport, Tensor};
pub use synthdata::{DataConfig, FederationDataset, Protocol, Sample};
