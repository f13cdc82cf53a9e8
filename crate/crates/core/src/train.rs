//! Parameter registry, optimizers, the training loop and evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{ComponentTag, GatingMode, LayerStats};
use crate::model::{count_params, Model, ModelGrads, Sublayer};
use crate::numeric::Vector;
use crate::rng::Rng;
use crate::routing::GlobalRouter;
use crate::synth::{one_hot_mix, Sample, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub tag: ComponentTag,
    pub trainable: bool,
    pub len: usize,
}

/// Every parameter tensor of a model, in optimizer order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ParamRegistry {
    pub fn from_model(model: &Model) -> Result<Self> {
        let mut entries = Vec::new();
        model.visit_params(&mut |name, tag, trainable, data| {
            entries.push(RegistryEntry {
                name: name.to_string(),
                tag,
                trainable,
                len: data.len(),
            });
        });
        let reg = Self { entries };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.tag == ComponentTag::Base && e.trainable {
                return Err(Error::invalid(format!("frozen tensor {} marked trainable", e.name)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::invalid(format!("tensor {} registered twice", e.name)));
            }
        }
        Ok(())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|e| e.len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-tensor optimizer state, aligned with the registry's trainable entries.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, registry: &ParamRegistry) -> Self {
        let zeros = || registry.trainable().map(|e| vec![0.0; e.len]).collect::<Vec<_>>();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second,
        }
    }

    /// Applies one update and re-clamps thresholds.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads) -> Result<()> {
        let mut flat: Vec<&[f64]> = Vec::new();
        grads.visit(model, &mut |g| flat.push(g));
        if flat.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "gradient has {} tensors, optimizer tracks {}",
                flat.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let config = self.config;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut idx = 0;
        let mut mismatch = false;
        model.visit_trainable_mut(&mut |_, params| {
            let g = flat[idx];
            if g.len() != params.len() {
                mismatch = true;
                idx += 1;
                return;
            }
            match config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    let m = &mut first[idx];
                    for ((p, gi), mi) in params.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *p -= lr * *mi;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let m = &mut first[idx];
                    let v = &mut second[idx];
                    for (((p, gi), mi), vi) in params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            idx += 1;
        });
        if mismatch {
            return Err(Error::invalid("gradient tensor shape does not match parameter"));
        }
        model.clamp_thresholds();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullFinetune,
    PlainLora,
    #[serde(rename = "topk_mole")]
    TopKMole,
    Hdmole,
    /// Thresholds removed: dense `(P_g + P_l) / 2` weights.
    HdmoleNoThresholds,
    /// Local routing removed: global threshold gate only.
    HdmoleNoLocal,
    /// Global routing removed: local threshold gate only.
    HdmoleNoGlobal,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FullFinetune,
        Method::PlainLora,
        Method::TopKMole,
        Method::Hdmole,
        Method::HdmoleNoThresholds,
        Method::HdmoleNoLocal,
        Method::HdmoleNoGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullFinetune => "full_finetune",
            Method::PlainLora => "plain_lora",
            Method::TopKMole => "topk_mole",
            Method::Hdmole => "hdmole",
            Method::HdmoleNoThresholds => "hdmole_no_thresholds",
            Method::HdmoleNoLocal => "hdmole_no_local",
            Method::HdmoleNoGlobal => "hdmole_no_global",
        }
    }

    /// Gating used by the adapter layers, `None` for full fine-tuning.
    pub fn gating(self, top_k: usize) -> Option<GatingMode> {
        match self {
            Method::FullFinetune => None,
            Method::PlainLora => Some(GatingMode::Plain),
            Method::TopKMole => Some(GatingMode::TopK { k: top_k }),
            Method::Hdmole => Some(GatingMode::Hierarchical),
            Method::HdmoleNoThresholds => Some(GatingMode::DenseSoftmax),
            Method::HdmoleNoLocal => Some(GatingMode::GlobalOnly),
            Method::HdmoleNoGlobal => Some(GatingMode::LocalOnly),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            steps: 2000,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub losses: Vec<f64>,
}

/// Mean squared error over output coordinates and its gradient.
fn mse(out: &Vector, target: &Vector) -> (f64, Vector) {
    let n = out.len() as f64;
    let diff: Vec<f64> = out.iter().zip(target.iter()).map(|(o, t)| o - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff.into_iter().map(|d| 2.0 * d / n).collect::<Vec<_>>().into())
}

/// Loss and accumulated gradients over one batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[Sample],
    global_weights: &[Vector],
) -> Result<(f64, ModelGrads)> {
    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    for (s, pg) in batch.iter().zip(global_weights) {
        let (out, cache) = model.forward_cached(&s.features, pg)?;
        let (l, g) = mse(&out, &s.target);
        loss += l;
        model.backward(&cache, &g, &mut grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Where training batches come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    /// A fresh i.i.d. draw from `mix` for every batch.
    Fresh { task: &'a TaskSpec, mix: &'a [f64] },
    /// A fixed finite training set, resampled with replacement.
    Pool(&'a [Sample]),
}

/// Trains `model` in place.
///
/// Batches come from `rng`'s `train/data` stream and router noise from
/// `router/noise/train`, so two runs with the same seed see the same batches
/// regardless of method. A pool sample keeps one global-router output for the
/// whole run, as a frozen classifier would give.
pub fn train(
    model: &mut Model,
    data: TrainData<'_>,
    router: &GlobalRouter,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainingCurve> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let registry = ParamRegistry::from_model(model)?;
    let mut opt = Optimizer::new(cfg.optimizer, &registry);
    let mut data_rng = rng.derive("train/data");
    let mut noise_rng = rng.derive("router/noise/train");
    let pool_routes = match data {
        TrainData::Pool(pool) => {
            if pool.is_empty() {
                return Err(Error::invalid("training pool is empty"));
            }
            pool.iter()
                .map(|s| router.route(&s.features, s.expert_domain(), &mut noise_rng))
                .collect::<Result<Vec<_>>>()?
        }
        TrainData::Fresh { .. } => Vec::new(),
    };
    let mut curve = TrainingCurve::default();
    for step in 0..cfg.steps {
        let (batch, pgs) = match data {
            TrainData::Fresh { task, mix } => {
                let batch = task.sample_batch(mix, cfg.batch_size, &mut data_rng)?;
                let pgs = batch
                    .iter()
                    .map(|s| router.route(&s.features, s.expert_domain(), &mut noise_rng))
                    .collect::<Result<Vec<_>>>()?;
                (batch, pgs)
            }
            TrainData::Pool(pool) => {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| data_rng.below(pool.len())).collect();
                (
                    idx.iter().map(|&i| pool[i].clone()).collect(),
                    idx.iter().map(|&i| pool_routes[i].clone()).collect(),
                )
            }
        };
        // Blown-up parameters surface as non-finite activations before the loss.
        let (loss, grads) = match batch_gradients(model, &batch, &pgs) {
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.losses.push(loss);
        if registry.num_trainable() > 0 {
            opt.step(model, &grads)?;
        }
    }
    Ok(curve)
}

/// Fits a freshly initialized frozen base on the source domain only, by
/// full fine-tuning a trainable clone, and returns it frozen again.
pub fn pretrain_base(
    base: &Model,
    task: &TaskSpec,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<(Model, TrainingCurve)> {
    let mut model = base.base_model();
    model.trainable_base = true;
    let router = GlobalRouter::oracle(task.num_target_domains())?;
    let mix = one_hot_mix(task.num_domains(), 0);
    let curve = train(
        &mut model,
        TrainData::Fresh { task, mix: &mix },
        &router,
        cfg,
        &rng.derive("pretrain"),
    )?;
    model.trainable_base = false;
    Ok((model, curve))
}

/// Builds the model a method trains, starting from a frozen base.
pub fn prepare_model(
    base: &Model,
    method: Method,
    adapters: &crate::model::ModelConfig,
    top_k: usize,
    rng: &Rng,
) -> Result<Model> {
    match method.gating(top_k) {
        None => {
            let mut m = base.base_model();
            m.trainable_base = true;
            Ok(m)
        }
        Some(gating) => {
            let mut cfg = adapters.clone();
            cfg.gating = gating;
            if method == Method::PlainLora {
                cfg.num_experts = 1;
            }
            base.with_adapters(&cfg, rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_domain: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_domain: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublayerStats {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub stats: LayerStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_loss: f64,
    pub source_loss: f64,
    pub per_domain_loss: Vec<f64>,
    pub trainable_params: usize,
    pub layer_stats: Vec<SublayerStats>,
}

impl EvalReport {
    /// Mean active experts per block, pooled over its wrapped sublayers.
    pub fn mean_active_per_layer(&self) -> Vec<f64> {
        let layers = self.layer_stats.iter().map(|s| s.layer + 1).max().unwrap_or(0);
        (0..layers)
            .filter_map(|l| {
                let mut pooled = LayerStats::default();
                let mut any = false;
                for s in self.layer_stats.iter().filter(|s| s.layer == l) {
                    pooled.merge(&s.stats);
                    any = true;
                }
                any.then(|| pooled.mean_active())
            })
            .collect()
    }
}

/// Held-out evaluation on every domain.
///
/// Samples come from `rng`'s `eval/data/<domain>` streams, disjoint from the
/// training streams; router noise from `router/noise/eval`. Activation
/// statistics are gathered on the target domains only.
pub fn evaluate(
    model: &Model,
    task: &TaskSpec,
    router: &GlobalRouter,
    cfg: &EvalConfig,
    rng: &Rng,
) -> Result<EvalReport> {
    let mut noise_rng = rng.derive("router/noise/eval");
    let mut stats: Vec<SublayerStats> = model
        .mole_layers()
        .map(|(layer, sublayer, m)| SublayerStats {
            layer,
            sublayer,
            stats: LayerStats::new(m.num_experts()),
        })
        .collect();
    let mut per_domain_loss = Vec::with_capacity(task.num_domains());
    for domain in 0..task.num_domains() {
        let mut data_rng = rng.derive_index("eval/data", domain as u64);
        let mut total = 0.0;
        for _ in 0..cfg.samples_per_domain {
            let s = task.sample(domain, &mut data_rng)?;
            let pg = router.route(&s.features, s.expert_domain(), &mut noise_rng)?;
            let (out, cache) = model.forward_cached(&s.features, &pg)?;
            total += mse(&out, &s.target).0;
            if domain > 0 {
                for (st, (_, _, gate)) in stats.iter_mut().zip(cache.gates()) {
                    st.stats.record(gate);
                }
            }
        }
        per_domain_loss.push(total / cfg.samples_per_domain.max(1) as f64);
    }
    let target_loss = per_domain_loss[1..].iter().sum::<f64>() / (task.num_domains() - 1) as f64;
    Ok(EvalReport {
        target_loss,
        source_loss: per_domain_loss[0],
        per_domain_loss,
        trainable_params: count_params(model).trainable,
        layer_stats: stats,
    })
}
