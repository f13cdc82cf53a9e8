//! Mixture of LoRA experts with hierarchical routing and learnable
//! dynamic-threshold gating, plus the baselines, synthetic multi-domain task
//! and experiment harness used to study it.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod layer;
pub mod lora;
pub mod model;
pub mod numeric;
pub mod report;
pub mod rng;
pub mod routing;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use layer::{GatingMode, HdmoleLayer};
pub use model::{Model, ModelConfig, Sublayer};
pub use numeric::{Matrix, Vector};
pub use rng::Rng;
