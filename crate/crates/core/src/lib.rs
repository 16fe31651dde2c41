//! Desk-scale simulator for federated fine-tuning with low-rank adapters.
//!
//! Clients train only LoRA factors on top of a frozen backbone and exchange
//! those factors with a server that aggregates them, either by dataset size
//! or by influence-aware weights derived from a small server-side
//! validation set. The crate bundles everything needed to run and score
//! such federations end to end:
//!
//! - [`lora`] and [`codec`]: adapter algebra and the binary wire format.
//! - [`model`]: a small differentiable tagger/relation classifier whose only
//!   trainable parameters are adapters.
//! - [`data`]: planted-rule multi-site datasets with controllable skew.
//! - [`aggregation`] and [`federation`]: the server side of the protocol.
//! - [`metrics`]: span and relation scoring, bootstrap intervals, rank-sum test.
//! - [`comm`]: communication accounting.
//! - [`experiment`]: config-driven experiment runs that produce CSV/JSON output.

pub mod aggregation;
pub mod codec;
pub mod comm;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod seed;

pub use aggregation::{AggregationRule, AggregationWeights, ClientId, InfluenceReport, WeightMode};
pub use error::{Error, Result};
pub use federation::{FederationConfig, FederationResult, RoundTranscript, Strategy};
pub use lora::{AdapterPair, AdapterSet, BackboneWeights};
pub use matrix::Matrix;
pub use metrics::{EvalReport, Scheme, Span};
pub use model::{Example, ModelConfig, SgdConfig, Task, ToyModel};
