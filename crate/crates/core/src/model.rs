//! A small stacked stand-in for a transformer projector.
//!
//! Each block has four `d → d` projections (`q`, `k`, `v`, `o`) and a
//! two-matrix feed-forward pair (`ffn1: d → f`, `ffn2: f → d`):
//!
//! ```text
//! c  = v(h) ⊙ σ(q(h) ⊙ k(h))
//! h1 = h + o(c)
//! h2 = h1 + ffn2(tanh(ffn1(h1)))
//! ```
//!
//! Any subset of the six sublayers can be wrapped in an [`HdmoleLayer`]; the
//! rest stay plain frozen linears.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateResult;
use crate::layer::{ComponentTag, ForwardCache, GatingMode, HdmoleLayer, LayerGrads};
use crate::lora::FrozenLinear;
use crate::numeric::{Matrix, Vector};
use crate::rng::{Rng, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Q,
    K,
    V,
    O,
    Ffn1,
    Ffn2,
}

impl Sublayer {
    pub const ALL: [Sublayer; 6] = [
        Sublayer::Q,
        Sublayer::K,
        Sublayer::V,
        Sublayer::O,
        Sublayer::Ffn1,
        Sublayer::Ffn2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Q => "q",
            Sublayer::K => "k",
            Sublayer::V => "v",
            Sublayer::O => "o",
            Sublayer::Ffn1 => "ffn1",
            Sublayer::Ffn2 => "ffn2",
        }
    }

    /// `(d_in, d_out)` for a block of width `d` and feed-forward width `f`.
    pub fn dims(self, d: usize, f: usize) -> (usize, usize) {
        match self {
            Sublayer::Ffn1 => (d, f),
            Sublayer::Ffn2 => (f, d),
            _ => (d, d),
        }
    }
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sublayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Sublayer::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sublayer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub wrapped_sublayers: BTreeSet<Sublayer>,
    pub gating: GatingMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("layers, model_dim and ffn_dim must be positive"));
        }
        if self.wrapped_sublayers.is_empty() {
            return Ok(());
        }
        if self.num_experts == 0 {
            return Err(Error::invalid("num_experts must be positive"));
        }
        self.gating.validate(self.num_experts)?;
        let min_dim = self
            .wrapped_sublayers
            .iter()
            .map(|s| {
                let (i, o) = s.dims(self.model_dim, self.ffn_dim);
                i.min(o)
            })
            .min()
            .unwrap_or(usize::MAX);
        if self.rank == 0 || self.rank >= min_dim {
            return Err(Error::invalid(format!(
                "rank {} must satisfy 0 < r < {min_dim} (smallest wrapped dimension)",
                self.rank
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Slot {
    Linear(FrozenLinear),
    Mole(HdmoleLayer),
}

impl Slot {
    pub fn base(&self) -> &FrozenLinear {
        match self {
            Slot::Linear(l) => l,
            Slot::Mole(m) => &m.base,
        }
    }

    pub fn as_mole(&self) -> Option<&HdmoleLayer> {
        match self {
            Slot::Mole(m) => Some(m),
            Slot::Linear(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub slots: Vec<Slot>,
}

impl Block {
    pub fn slot(&self, s: Sublayer) -> &Slot {
        &self.slots[s.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    /// When set, the base linears are trainable (full fine-tuning on a clone).
    pub trainable_base: bool,
}

#[derive(Debug, Clone)]
enum SlotCache {
    Linear(Vector),
    Mole(Box<ForwardCache>),
}

#[derive(Debug, Clone)]
struct BlockCache {
    slots: Vec<SlotCache>,
    q: Vector,
    k: Vector,
    v: Vector,
    sig: Vector,
    act: Vector,
}

/// Intermediates of one [`Model::forward_cached`] call.
#[derive(Debug, Clone)]
pub struct ModelCache {
    blocks: Vec<BlockCache>,
    pub expert_evals: usize,
}

impl ModelCache {
    /// Gate decisions of every wrapped sublayer, as `(block, sublayer, gate)`.
    pub fn gates(&self) -> impl Iterator<Item = (usize, Sublayer, &GateResult)> {
        self.blocks.iter().enumerate().flat_map(|(b, bc)| {
            bc.slots.iter().zip(Sublayer::ALL).filter_map(move |(s, sub)| match s {
                SlotCache::Mole(c) => Some((b, sub, c.gate())),
                SlotCache::Linear(_) => None,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotGrads {
    Frozen,
    Linear { w: Matrix, bias: Vector },
    Mole(LayerGrads),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub blocks: Vec<Vec<SlotGrads>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Model {
    /// Random frozen base with adapters on `cfg.wrapped_sublayers`.
    pub fn build(cfg: &ModelConfig, rng: &Rng) -> Result<Model> {
        cfg.validate()?;
        let base = Self::random_base(cfg, rng)?;
        base.with_adapters(cfg, rng)
    }

    /// Model with every sublayer a plain linear drawn from `rng`'s `model/base` stream.
    pub fn random_base(cfg: &ModelConfig, rng: &Rng) -> Result<Model> {
        if cfg.layers == 0 || cfg.model_dim == 0 || cfg.ffn_dim == 0 {
            return Err(Error::invalid("layers, model_dim and ffn_dim must be positive"));
        }
        let base_rng = rng.derive("model/base");
        let blocks = (0..cfg.layers)
            .map(|l| {
                let slots = Sublayer::ALL
                    .iter()
                    .map(|s| {
                        let (i, o) = s.dims(cfg.model_dim, cfg.ffn_dim);
                        let mut r = base_rng.derive(&format!("block{l}/{s}"));
                        FrozenLinear::random(&mut r, i, o).map(Slot::Linear)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Block { slots })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut config = cfg.clone();
        config.wrapped_sublayers.clear();
        Ok(Model {
            config,
            blocks,
            trainable_base: false,
        })
    }

    /// Wraps this model's base linears per `cfg`, keeping their weights.
    /// Adapter init draws from `rng`'s `model/adapters` stream, one child per sublayer.
    pub fn with_adapters(&self, cfg: &ModelConfig, rng: &Rng) -> Result<Model> {
        cfg.validate()?;
        if cfg.layers != self.blocks.len()
            || cfg.model_dim != self.config.model_dim
            || cfg.ffn_dim != self.config.ffn_dim
        {
            return Err(Error::invalid("adapter config does not match base model shape"));
        }
        let ad_rng = rng.derive("model/adapters");
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(l, block)| {
                let slots = Sublayer::ALL
                    .iter()
                    .map(|s| {
                        let base = block.slot(*s).base().clone();
                        if cfg.wrapped_sublayers.contains(s) {
                            let mut r = ad_rng.derive(&format!("block{l}/{s}"));
                            HdmoleLayer::new(&mut r, base, cfg.num_experts, cfg.rank, cfg.alpha, cfg.gating)
                                .map(Slot::Mole)
                        } else {
                            Ok(Slot::Linear(base))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Block { slots })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config: cfg.clone(),
            blocks,
            trainable_base: false,
        })
    }

    /// The frozen base with all adapters stripped.
    pub fn base_model(&self) -> Model {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                slots: b.slots.iter().map(|s| Slot::Linear(s.base().clone())).collect(),
            })
            .collect();
        let mut config = self.config.clone();
        config.wrapped_sublayers.clear();
        Model {
            config,
            blocks,
            trainable_base: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, x: &Vector, p_g: &Vector) -> Result<Vector> {
        Ok(self.forward_cached(x, p_g)?.0)
    }

    pub fn forward_cached(&self, x: &Vector, p_g: &Vector) -> Result<(Vector, ModelCache)> {
        if x.len() != self.dim() {
            return Err(Error::shape("model_forward", (self.dim(), 1), (x.len(), 1)));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut expert_evals = 0;
        for block in &self.blocks {
            let mut slot_caches = Vec::with_capacity(6);
            let mut run = |slot: &Slot, input: &Vector| -> Result<Vector> {
                match slot {
                    Slot::Linear(l) => {
                        slot_caches.push(SlotCache::Linear(input.clone()));
                        l.forward(input)
                    }
                    Slot::Mole(m) => {
                        let (out, _, c) = m.forward(input, p_g)?;
                        expert_evals += c.expert_evals;
                        slot_caches.push(SlotCache::Mole(Box::new(c)));
                        Ok(out)
                    }
                }
            };
            let q = run(block.slot(Sublayer::Q), &h)?;
            let k = run(block.slot(Sublayer::K), &h)?;
            let v = run(block.slot(Sublayer::V), &h)?;
            let sig = q.hadamard(&k).map(sigmoid);
            let c = v.hadamard(&sig);
            let mut h1 = h.clone();
            h1.add_scaled(1.0, &run(block.slot(Sublayer::O), &c)?)?;
            let act = run(block.slot(Sublayer::Ffn1), &h1)?.map(f64::tanh);
            let mut h2 = h1;
            h2.add_scaled(1.0, &run(block.slot(Sublayer::Ffn2), &act)?)?;
            caches.push(BlockCache {
                slots: slot_caches,
                q,
                k,
                v,
                sig,
                act,
            });
            h = h2;
        }
        Ok((
            h,
            ModelCache {
                blocks: caches,
                expert_evals,
            },
        ))
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    b.slots
                        .iter()
                        .map(|s| match s {
                            Slot::Mole(m) => SlotGrads::Mole(LayerGrads::zeros_like(m)),
                            Slot::Linear(l) if self.trainable_base => SlotGrads::Linear {
                                w: Matrix::zeros(l.d_out(), l.d_in()),
                                bias: Vector::zeros(l.d_out()),
                            },
                            Slot::Linear(_) => SlotGrads::Frozen,
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &ModelCache, grad_out: &Vector, grads: &mut ModelGrads) -> Result<Vector> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::StaleCache("block count differs".into()));
        }
        let mut g = grad_out.clone();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let bg = &mut grads.blocks[bi];
            let mut back = |s: Sublayer, upstream: &Vector| -> Result<Vector> {
                let i = s.index();
                match (&block.slots[i], &bc.slots[i], &mut bg[i]) {
                    (Slot::Mole(m), SlotCache::Mole(c), SlotGrads::Mole(acc)) => {
                        m.backward_accumulate(c, upstream, acc)
                    }
                    (Slot::Linear(l), SlotCache::Linear(x), SlotGrads::Linear { w, bias }) => {
                        w.add_outer(1.0, upstream, x)?;
                        bias.add_scaled(1.0, upstream)?;
                        l.w0.matvec_t(upstream)
                    }
                    (Slot::Linear(l), SlotCache::Linear(_), SlotGrads::Frozen) => l.w0.matvec_t(upstream),
                    _ => Err(Error::StaleCache(format!("slot {s} does not match cache"))),
                }
            };
            // h2 = h1 + ffn2(tanh(ffn1(h1)))
            let g_act = back(Sublayer::Ffn2, &g)?;
            let g_pre: Vector = g_act
                .iter()
                .zip(bc.act.iter())
                .map(|(ga, a)| ga * (1.0 - a * a))
                .collect::<Vec<_>>()
                .into();
            let mut g_h1 = g.clone();
            g_h1.add_scaled(1.0, &back(Sublayer::Ffn1, &g_pre)?)?;
            // h1 = h + o(v ⊙ σ(q ⊙ k))
            let g_c = back(Sublayer::O, &g_h1)?;
            let g_v = g_c.hadamard(&bc.sig);
            let g_qk: Vector = g_c
                .iter()
                .zip(bc.v.iter())
                .zip(bc.sig.iter())
                .map(|((gc, v), s)| gc * v * s * (1.0 - s))
                .collect::<Vec<_>>()
                .into();
            let g_q = g_qk.hadamard(&bc.k);
            let g_k = g_qk.hadamard(&bc.q);
            let mut g_h = g_h1;
            g_h.add_scaled(1.0, &back(Sublayer::Q, &g_q)?)?;
            g_h.add_scaled(1.0, &back(Sublayer::K, &g_k)?)?;
            g_h.add_scaled(1.0, &back(Sublayer::V, &g_v)?)?;
            g = g_h;
        }
        Ok(g)
    }

    /// Visits every parameter tensor with its registry name, tag and trainable flag.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ComponentTag, bool, &[f64])) {
        for (bi, block) in self.blocks.iter().enumerate() {
            for (s, slot) in Sublayer::ALL.iter().zip(&block.slots) {
                let prefix = format!("block{bi}.{s}");
                match slot {
                    Slot::Mole(m) => m.visit_params(&prefix, f),
                    Slot::Linear(l) => {
                        let (tag, trainable) = if self.trainable_base {
                            (ComponentTag::FullWeight, true)
                        } else {
                            (ComponentTag::Base, false)
                        };
                        f(&format!("{prefix}.w0"), tag, trainable, l.w0.as_slice());
                        f(&format!("{prefix}.bias"), tag, trainable, l.bias.as_slice());
                    }
                }
            }
        }
    }

    /// Mutable visit over trainable tensors in registry order.
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(ComponentTag, &mut [f64])) {
        let trainable_base = self.trainable_base;
        for block in &mut self.blocks {
            for slot in &mut block.slots {
                match slot {
                    Slot::Mole(m) => m.visit_trainable_mut(f),
                    Slot::Linear(l) if trainable_base => {
                        f(ComponentTag::FullWeight, l.w0.as_mut_slice());
                        f(ComponentTag::FullWeight, l.bias.as_mut_slice());
                    }
                    Slot::Linear(_) => {}
                }
            }
        }
    }

    pub fn clamp_thresholds(&mut self) {
        for block in &mut self.blocks {
            for slot in &mut block.slots {
                if let Slot::Mole(m) = slot {
                    m.clamp_thresholds();
                }
            }
        }
    }

    /// Iterates wrapped sublayers as `(block, sublayer, layer)`.
    pub fn mole_layers(&self) -> impl Iterator<Item = (usize, Sublayer, &HdmoleLayer)> {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            block
                .slots
                .iter()
                .zip(Sublayer::ALL)
                .filter_map(move |(slot, s)| slot.as_mole().map(|m| (b, s, m)))
        })
    }

    /// FNV-1a over the bit patterns of every parameter, in registry order.
    pub fn checksum(&self, filter: impl Fn(ComponentTag) -> bool) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit_params(&mut |_, tag, _, data| {
            if filter(tag) {
                for v in data {
                    for byte in v.to_bits().to_le_bytes() {
                        hash ^= byte as u64;
                        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
            }
        });
        hash
    }
}

impl ModelGrads {
    /// Visits gradient tensors in the same order as [`Model::visit_trainable_mut`].
    pub fn visit<'a>(&'a self, model: &Model, f: &mut dyn FnMut(&'a [f64])) {
        for (block, grads) in model.blocks.iter().zip(&self.blocks) {
            for (slot, g) in block.slots.iter().zip(grads) {
                match (slot, g) {
                    (Slot::Mole(m), SlotGrads::Mole(lg)) => lg.visit(m.gating, f),
                    (_, SlotGrads::Linear { w, bias }) => {
                        f(w.as_slice());
                        f(bias.as_slice());
                    }
                    _ => {}
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for block in &mut self.blocks {
            for g in block {
                match g {
                    SlotGrads::Mole(lg) => lg.scale(s),
                    SlotGrads::Linear { w, bias } => {
                        w.scale(s);
                        bias.as_mut_slice().iter_mut().for_each(|v| *v *= s);
                    }
                    SlotGrads::Frozen => {}
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub frozen: usize,
    pub trainable_experts: usize,
    pub trainable_routers: usize,
    pub trainable_thresholds: usize,
    pub trainable_full: usize,
    pub trainable: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

pub fn count_params(model: &Model) -> ParamReport {
    let mut r = ParamReport::default();
    model.visit_params(&mut |_, tag, trainable, data| {
        let n = data.len();
        match (tag, trainable) {
            (ComponentTag::Base, _) => r.frozen += n,
            (ComponentTag::Expert, true) => r.trainable_experts += n,
            (ComponentTag::LocalRouter, true) => r.trainable_routers += n,
            (ComponentTag::Threshold, true) => r.trainable_thresholds += n,
            (ComponentTag::FullWeight, true) => r.trainable_full += n,
            (_, false) => r.frozen += n,
        }
    });
    r.trainable = r.trainable_experts + r.trainable_routers + r.trainable_thresholds + r.trainable_full;
    r.total = r.trainable + r.frozen;
    r
}

/// Closed-form trainable count of one wrapped `d_in → d_out` sublayer in hierarchical mode.
pub fn hierarchical_sublayer_params(d_in: usize, d_out: usize, n: usize, r: usize) -> usize {
    n * r * (d_in + d_out) + n * d_in + 2
}

const CHECKPOINT_FORMAT: &str = "hdmole-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Model,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(model: Model, rng: Option<&Rng>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            rng: rng.map(Rng::state),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }
}
