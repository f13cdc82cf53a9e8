//! Experiment configuration: one versioned JSON document, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::GatingMode;
use crate::model::{ModelConfig, Sublayer};
use crate::routing::{GlobalRouter, GlobalRouterKind, ORACLE_SMOOTHING};
use crate::synth::TaskParams;
use crate::train::{EvalConfig, Method, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task: TaskSection,
    pub model: ModelSection,
    #[serde(default = "default_router")]
    pub router: GlobalRouterKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub report_formats: BTreeSet<ReportFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Source domain plus target domains.
    pub num_domains: usize,
    pub shift_strength: f64,
    pub shift_planes: usize,
    pub offset_std: f64,
    pub noise_std: f64,
    pub teacher_hidden: usize,
    /// Size of the fixed per-domain training set; `None` draws fresh samples every step.
    pub train_samples_per_domain: Option<usize>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            num_domains: 9,
            shift_strength: 1.0,
            shift_planes: 2,
            offset_std: 2.0,
            noise_std: 0.15,
            teacher_hidden: 32,
            train_samples_per_domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_wrapped")]
    pub wrapped_sublayers: BTreeSet<Sublayer>,
    /// `k` for the top-k baseline.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_router() -> GlobalRouterKind {
    GlobalRouterKind::Oracle
}
fn default_pretrain() -> TrainConfig {
    TrainConfig {
        steps: 3000,
        ..TrainConfig::default()
    }
}
fn default_methods() -> Vec<Method> {
    vec![Method::Hdmole]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_formats() -> BTreeSet<ReportFormat> {
    [ReportFormat::Json, ReportFormat::Csv].into_iter().collect()
}
fn default_wrapped() -> BTreeSet<Sublayer> {
    Sublayer::ALL.iter().copied().collect()
}
fn default_top_k() -> usize {
    2
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending key path, e.g. `model.rank`.
    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut *de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            Error::Config {
                key: key_path(&path, &message),
                message,
            }
        })?;
        de.end().map_err(|e| Error::Config {
            key: String::new(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.to_string(),
                message,
            })
        };
        if self.version != CONFIG_VERSION {
            return bad("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version));
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required".into());
        }
        if self.task.num_domains < 2 {
            return bad("task.num_domains", "need the source domain plus at least one target".into());
        }
        if !(self.task.shift_strength >= 0.0 && self.task.shift_strength.is_finite()) {
            return bad("task.shift_strength", "must be finite and non-negative".into());
        }
        if self.task.shift_planes == 0 || 2 * self.task.shift_planes > self.model.model_dim {
            return bad("task.shift_planes", "must be in 1..=model_dim/2".into());
        }
        if !(self.task.offset_std >= 0.0 && self.task.offset_std.is_finite()) {
            return bad("task.offset_std", "must be finite and non-negative".into());
        }
        if !(self.task.noise_std >= 0.0 && self.task.noise_std.is_finite()) {
            return bad("task.noise_std", "must be finite and non-negative".into());
        }
        if self.task.train_samples_per_domain == Some(0) {
            return bad("task.train_samples_per_domain", "must be positive".into());
        }
        if self.task.teacher_hidden == 0 {
            return bad("task.teacher_hidden", "must be positive".into());
        }
        if self.model.top_k == 0 || self.model.top_k > self.num_experts() {
            return bad("model.top_k", format!("must be in 1..={}", self.num_experts()));
        }
        for (key, t) in [("train", &self.train), ("pretrain", &self.pretrain)] {
            if t.batch_size == 0 {
                return bad(&format!("{key}.batch_size"), "must be positive".into());
            }
            t.optimizer.validate().map_err(|e| Error::Config {
                key: format!("{key}.optimizer"),
                message: e.to_string(),
            })?;
        }
        if self.eval.samples_per_domain == 0 {
            return bad("eval.samples_per_domain", "must be positive".into());
        }
        self.global_router().map_err(|e| Error::Config {
            key: "router".into(),
            message: e.to_string(),
        })?;
        self.model_config(GatingMode::Hierarchical, 0)
            .validate()
            .map_err(|e| Error::Config {
                key: "model".into(),
                message: e.to_string(),
            })
    }

    /// One expert per target domain.
    pub fn num_experts(&self) -> usize {
        self.task.num_domains - 1
    }

    pub fn task_params(&self, seed: u64) -> TaskParams {
        TaskParams {
            num_domains: self.task.num_domains,
            dim: self.model.model_dim,
            shift_strength: self.task.shift_strength,
            shift_planes: self.task.shift_planes,
            offset_std: self.task.offset_std,
            noise_std: self.task.noise_std,
            teacher_hidden: self.task.teacher_hidden,
            seed,
        }
    }

    pub fn model_config(&self, gating: GatingMode, seed: u64) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            model_dim: self.model.model_dim,
            ffn_dim: self.model.ffn_dim,
            num_experts: self.num_experts(),
            rank: self.model.rank,
            alpha: self.model.alpha,
            wrapped_sublayers: self.model.wrapped_sublayers.clone(),
            gating,
            seed,
        }
    }

    pub fn global_router(&self) -> Result<GlobalRouter> {
        GlobalRouter::new(self.router.clone(), self.num_experts(), ORACLE_SMOOTHING)
    }

    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }
}

/// Joins the deserializer path with the field named in a "missing field" message.
fn key_path(path: &str, message: &str) -> String {
    let field = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, field) {
        (".", Some(f)) | ("", Some(f)) => f.to_string(),
        (p, Some(f)) => format!("{p}.{f}"),
        (p, None) => p.to_string(),
    }
}
