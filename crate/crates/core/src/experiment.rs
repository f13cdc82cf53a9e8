//! Runs methods and ablation sweeps from an [`ExperimentConfig`].
//!
//! Each seed gets its own task, a base model fitted on the source domain and a
//! reference evaluation of that base. Every cell then adapts a copy of the
//! base. All cells of a seed share the `train` and `eval` streams, so methods
//! are compared on identical batches and identical held-out samples.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::routing::{GlobalRouter, GlobalRouterKind, ORACLE_SMOOTHING};
use crate::rng::Rng;
use crate::synth::{make_task, target_mix, Sample, TaskSpec};
use crate::train::{evaluate, prepare_model, pretrain_base, train, EvalReport, Method, TrainData};

/// Router accuracies swept by the `table2` suite.
pub const ROUTER_ACCURACIES: [f64; 3] = [0.6297, 0.8144, 1.0];
/// Ranks swept by the `table3` suite.
pub const RANKS: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Table1,
    Table2,
    Table3,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Suite::Table1),
            "table2" => Ok(Suite::Table2),
            "table3" => Ok(Suite::Table3),
            other => Err(Error::invalid(format!(
                "unknown suite `{other}` (expected table1, table2 or table3)"
            ))),
        }
    }
}

/// One trained and evaluated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    /// Sweep coordinate, e.g. `rank=16`; empty for plain runs.
    pub cell: String,
    pub trainable_params: usize,
    pub target_loss: f64,
    pub source_loss: f64,
    /// Losses of the unadapted base, for reference.
    pub target_loss_before: f64,
    pub source_loss_before: f64,
    pub forgetting_delta: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub mean_active_per_layer: Vec<f64>,
    pub report: EvalReport,
}

/// Everything shared by the cells of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub task: TaskSpec,
    pub base: Model,
    pub base_report: EvalReport,
    pub pretrain_losses: Vec<f64>,
    /// Finite target-domain training set, when the config asks for one.
    pub train_pool: Option<Vec<Sample>>,
}

impl SeedContext {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let task = make_task(&cfg.task_params(seed))?;
        let root = Rng::new(seed);
        let shape = cfg.model_config(crate::layer::GatingMode::Hierarchical, seed);
        let init = Model::random_base(&shape, &root.derive("model"))?;
        let (base, curve) = pretrain_base(&init, &task, &cfg.pretrain, &root)?;
        let router = cfg.global_router()?;
        let base_report = evaluate(&base, &task, &router, &cfg.eval, &root.derive("eval"))?;
        let train_pool = match cfg.task.train_samples_per_domain {
            None => None,
            Some(n) => {
                let mut prng = root.derive("train/pool");
                let mut pool = Vec::with_capacity(n * task.num_target_domains());
                for domain in 1..task.num_domains() {
                    for _ in 0..n {
                        pool.push(task.sample(domain, &mut prng)?);
                    }
                }
                Some(pool)
            }
        };
        Ok(Self {
            seed,
            task,
            base,
            base_report,
            pretrain_losses: curve.losses,
            train_pool,
        })
    }

    fn root(&self) -> Rng {
        Rng::new(self.seed)
    }

    /// Adapts the base with `method` and evaluates the result.
    pub fn run_cell(
        &self,
        cfg: &ExperimentConfig,
        method: Method,
        adapters: &ModelConfig,
        router: &GlobalRouter,
        cell: &str,
    ) -> Result<(RunRecord, Model)> {
        let root = self.root();
        let mut model = prepare_model(&self.base, method, adapters, cfg.model.top_k, &root.derive("model"))?;
        let mix = target_mix(self.task.num_domains());
        let data = match &self.train_pool {
            Some(pool) => TrainData::Pool(pool),
            None => TrainData::Fresh {
                task: &self.task,
                mix: &mix,
            },
        };
        let curve = train(&mut model, data, router, &cfg.train, &root.derive("train"))?;
        let report = evaluate(&model, &self.task, router, &cfg.eval, &root.derive("eval"))?;
        let before = self.base_report.source_loss;
        let record = RunRecord {
            method,
            seed: self.seed,
            cell: cell.to_string(),
            trainable_params: report.trainable_params,
            target_loss: report.target_loss,
            source_loss: report.source_loss,
            target_loss_before: self.base_report.target_loss,
            source_loss_before: before,
            forgetting_delta: report.source_loss - before,
            initial_train_loss: curve.losses.first().copied().unwrap_or(f64::NAN),
            final_train_loss: tail_mean(&curve.losses, 50),
            mean_active_per_layer: report.mean_active_per_layer(),
            report,
        };
        Ok((record, model))
    }
}

fn tail_mean(xs: &[f64], n: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Runs `cfg.methods` for every seed.
pub fn run_methods(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let router = cfg.global_router()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::prepare(cfg, seed)?;
        for &method in &cfg.methods {
            let adapters = cfg.model_config(crate::layer::GatingMode::Hierarchical, seed);
            out.push(ctx.run_cell(cfg, method, &adapters, &router, "")?.0);
        }
    }
    Ok(out)
}

/// Runs one of the sweeps for every seed in `cfg.seeds`.
///
/// * `table1`: every method, including the three ablations.
/// * `table2`: the hierarchical method under global routers of increasing accuracy.
/// * `table3`: the hierarchical method at increasing ranks, with `alpha = rank`.
pub fn run_ablation_suite(cfg: &ExperimentConfig, suite: Suite) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::prepare(cfg, seed)?;
        let adapters = cfg.model_config(crate::layer::GatingMode::Hierarchical, seed);
        match suite {
            Suite::Table1 => {
                let router = cfg.global_router()?;
                for method in Method::ALL {
                    out.push(ctx.run_cell(cfg, method, &adapters, &router, "")?.0);
                }
            }
            Suite::Table2 => {
                for acc in ROUTER_ACCURACIES {
                    let kind = if acc >= 1.0 {
                        GlobalRouterKind::Oracle
                    } else {
                        GlobalRouterKind::NoisyOracle { accuracy: acc }
                    };
                    let router = GlobalRouter::new(kind, cfg.num_experts(), ORACLE_SMOOTHING)?;
                    let cell = format!("router_accuracy={acc}");
                    out.push(ctx.run_cell(cfg, Method::Hdmole, &adapters, &router, &cell)?.0);
                }
            }
            Suite::Table3 => {
                let router = cfg.global_router()?;
                for rank in RANKS {
                    let mut a = adapters.clone();
                    a.rank = rank;
                    a.alpha = rank as f64;
                    let cell = format!("rank={rank}");
                    out.push(ctx.run_cell(cfg, Method::Hdmole, &a, &router, &cell)?.0);
                }
            }
        }
    }
    Ok(out)
}
