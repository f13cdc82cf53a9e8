//! The mixture-of-LoRA-experts layer.
//!
//! ```text
//! out = W0·h + (α/r) Σ_i P_a[i] · B_i·A_i·h + b
//! ```
//!
//! `P_a` comes from the configured [`GatingMode`]. In hierarchical mode it is
//! the sum of the threshold-gated global weights (shared by every layer for a
//! sample) and the threshold-gated local weights (this layer's router applied
//! to its own input). Experts whose `P_a[i]` is zero are never evaluated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{
    combine_adapted, masked_normalize_backward, threshold_gate, topk_gate, DynamicThreshold,
    GateResult, TopKGate,
};
use crate::lora::{FrozenLinear, LoraExpert};
use crate::numeric::{Matrix, Vector};
use crate::rng::Rng;
use crate::routing::{validate_probabilities, LocalRouter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GatingMode {
    /// Global and local threshold gates, summed.
    Hierarchical,
    /// Local threshold gate only (no global routing).
    LocalOnly,
    /// Global threshold gate only (no local router).
    GlobalOnly,
    /// Static top-k over the local router.
    TopK { k: usize },
    /// No thresholds: every expert weighted by `(P_g + P_l) / 2`.
    DenseSoftmax,
    /// A single always-on expert with weight one, i.e. plain LoRA.
    Plain,
}

impl GatingMode {
    pub fn uses_local_router(self) -> bool {
        !matches!(self, GatingMode::GlobalOnly | GatingMode::Plain)
    }

    pub fn uses_global(self) -> bool {
        matches!(
            self,
            GatingMode::Hierarchical | GatingMode::GlobalOnly | GatingMode::DenseSoftmax
        )
    }

    pub fn uses_tau_g(self) -> bool {
        matches!(self, GatingMode::Hierarchical | GatingMode::GlobalOnly)
    }

    pub fn uses_tau_l(self) -> bool {
        matches!(self, GatingMode::Hierarchical | GatingMode::LocalOnly)
    }

    pub fn num_thresholds(self) -> usize {
        self.uses_tau_g() as usize + self.uses_tau_l() as usize
    }

    pub fn validate(self, num_experts: usize) -> Result<()> {
        match self {
            GatingMode::TopK { k } if k == 0 || k > num_experts => Err(Error::invalid(format!(
                "top-k needs 1 <= k <= {num_experts}, got {k}"
            ))),
            GatingMode::Plain if num_experts != 1 => Err(Error::invalid(
                "plain LoRA gating requires exactly one expert",
            )),
            _ if num_experts == 0 => Err(Error::invalid("need at least one expert")),
            _ => Ok(()),
        }
    }
}

/// Whether inactive experts are skipped (the normal path) or evaluated anyway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertEval {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HdmoleLayer {
    pub base: FrozenLinear,
    pub experts: Vec<LoraExpert>,
    pub local_router: LocalRouter,
    pub tau_g: DynamicThreshold,
    pub tau_l: DynamicThreshold,
    pub gating: GatingMode,
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for HdmoleLayer {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base
            && self.experts == other.experts
            && self.local_router == other.local_router
            && self.tau_g == other.tau_g
            && self.tau_l == other.tau_l
            && self.gating == other.gating
    }
}

/// Intermediates kept from [`HdmoleLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    shape: (usize, usize, usize),
    h: Vector,
    p_g: Option<Vector>,
    p_l: Option<Vector>,
    gate_g: Option<GateResult>,
    gate_l: Option<GateResult>,
    gate: GateResult,
    low_rank: Vec<Option<(Vector, Vector)>>,
    /// Number of experts whose `A`/`B` products were evaluated.
    pub expert_evals: usize,
}

impl ForwardCache {
    pub fn gate(&self) -> &GateResult {
        &self.gate
    }

    pub fn local_weights(&self) -> Option<&Vector> {
        self.p_l.as_ref()
    }

    pub fn global_gate(&self) -> Option<&GateResult> {
        self.gate_g.as_ref()
    }

    pub fn local_gate(&self) -> Option<&GateResult> {
        self.gate_l.as_ref()
    }
}

/// Gradients of every trainable quantity of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub wg: Matrix,
    pub tau_g: f64,
    pub tau_l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: LayerGrads,
    pub h: Vector,
}

impl LayerGrads {
    pub fn zeros_like(layer: &HdmoleLayer) -> Self {
        Self {
            a: layer.experts.iter().map(|e| Matrix::zeros(e.a.rows(), e.a.cols())).collect(),
            b: layer.experts.iter().map(|e| Matrix::zeros(e.b.rows(), e.b.cols())).collect(),
            wg: Matrix::zeros(layer.local_router.wg.rows(), layer.local_router.wg.cols()),
            tau_g: 0.0,
            tau_l: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(&self.b).chain(std::iter::once(&self.wg))
            .all(|m| m.as_slice().iter().all(|v| *v == 0.0))
            && self.tau_g == 0.0
            && self.tau_l == 0.0
    }
}

/// Component a parameter belongs to, for the optimizer registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentTag {
    Expert,
    LocalRouter,
    Threshold,
    /// Frozen pre-trained weights. Never trainable.
    Base,
    /// Pre-trained weights deliberately unfrozen on a cloned model (full fine-tuning).
    FullWeight,
}

impl HdmoleLayer {
    pub fn new(
        rng: &mut Rng,
        base: FrozenLinear,
        num_experts: usize,
        rank: usize,
        alpha: f64,
        gating: GatingMode,
    ) -> Result<Self> {
        gating.validate(num_experts)?;
        let (d_in, d_out) = (base.d_in(), base.d_out());
        let experts = (0..num_experts)
            .map(|i| LoraExpert::new(&mut rng.derive_index("expert", i as u64), d_in, d_out, rank, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            experts,
            local_router: LocalRouter::zeros(num_experts, d_in),
            tau_g: DynamicThreshold::new(num_experts),
            tau_l: DynamicThreshold::new(num_experts),
            gating,
            generation: 0,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.base.d_out()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].rank
    }

    pub fn alpha(&self) -> f64 {
        self.experts[0].alpha
    }

    fn scale(&self) -> f64 {
        self.alpha() / self.rank() as f64
    }

    fn shape_key(&self) -> (usize, usize, usize) {
        (self.d_in(), self.d_out(), self.num_experts())
    }

    /// Marks the layer as modified so outstanding caches become stale.
    pub fn touch(&mut self) {
        self.generation = self.generation.wrapping_add(1);
    }

    /// Computes `P_a` for input `h` and global weights `p_g`.
    pub fn gate(&self, h: &Vector, p_g: &Vector) -> Result<(GateResult, Gates)> {
        let n = self.num_experts();
        if self.gating.uses_global() {
            if p_g.len() != n {
                return Err(Error::shape("global weights", (n, 1), (p_g.len(), 1)));
            }
            validate_probabilities(p_g)?;
        }
        let p_l = if self.gating.uses_local_router() {
            Some(self.local_router.route(h)?)
        } else {
            None
        };
        let mut gates = Gates {
            p_l: p_l.clone(),
            gate_g: None,
            gate_l: None,
        };
        let result = match self.gating {
            GatingMode::Hierarchical => {
                let g = threshold_gate(p_g, self.tau_g)?;
                let l = threshold_gate(p_l.as_ref().expect("router"), self.tau_l)?;
                let pa = combine_adapted(&g, &l)?;
                gates.gate_g = Some(g);
                gates.gate_l = Some(l);
                pa
            }
            GatingMode::LocalOnly => {
                let l = threshold_gate(p_l.as_ref().expect("router"), self.tau_l)?;
                gates.gate_l = Some(l.clone());
                l
            }
            GatingMode::GlobalOnly => {
                let g = threshold_gate(p_g, self.tau_g)?;
                gates.gate_g = Some(g.clone());
                g
            }
            GatingMode::TopK { k } => topk_gate(p_l.as_ref().expect("router"), TopKGate { k })?,
            GatingMode::DenseSoftmax => {
                let pl = p_l.as_ref().expect("router");
                let adapted: Vec<f64> = p_g.iter().zip(pl.iter()).map(|(g, l)| 0.5 * (g + l)).collect();
                GateResult {
                    adapted: adapted.into(),
                    mask: vec![true; n],
                    active_count: n,
                    fallback: false,
                }
            }
            GatingMode::Plain => GateResult {
                adapted: Vector::filled(1, 1.0),
                mask: vec![true],
                active_count: 1,
                fallback: false,
            },
        };
        Ok((result, gates))
    }

    pub fn forward(&self, h: &Vector, p_g: &Vector) -> Result<(Vector, GateResult, ForwardCache)> {
        self.forward_with(h, p_g, ExpertEval::Sparse)
    }

    pub fn forward_with(
        &self,
        h: &Vector,
        p_g: &Vector,
        eval: ExpertEval,
    ) -> Result<(Vector, GateResult, ForwardCache)> {
        if h.len() != self.d_in() {
            return Err(Error::shape("layer_forward", (self.d_out(), self.d_in()), (h.len(), 1)));
        }
        let (gate, gates) = self.gate(h, p_g)?;
        let mut out = self.base.w0.matvec(h)?;
        let scale = self.scale();
        let mut low_rank = Vec::with_capacity(self.num_experts());
        let mut expert_evals = 0;
        for (i, expert) in self.experts.iter().enumerate() {
            let w = gate.adapted[i];
            if w == 0.0 && eval == ExpertEval::Sparse {
                low_rank.push(None);
                continue;
            }
            let (u, v) = expert.project(h)?;
            out.add_scaled(scale * w, &v)?;
            expert_evals += 1;
            low_rank.push(Some((u, v)));
        }
        out.add_scaled(1.0, &self.base.bias)?;
        let cache = ForwardCache {
            generation: self.generation,
            shape: self.shape_key(),
            h: h.clone(),
            p_g: self.gating.uses_global().then(|| p_g.clone()),
            p_l: gates.p_l,
            gate_g: gates.gate_g,
            gate_l: gates.gate_l,
            gate: gate.clone(),
            low_rank,
            expert_evals,
        };
        Ok((out, gate, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: &Vector) -> Result<GradientBundle> {
        let mut params = LayerGrads::zeros_like(self);
        let h = self.backward_accumulate(cache, grad_out, &mut params)?;
        Ok(GradientBundle { params, h })
    }

    /// Adds this sample's parameter gradients into `acc` and returns `dL/dh`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        grad_out: &Vector,
        acc: &mut LayerGrads,
    ) -> Result<Vector> {
        if cache.generation != self.generation || cache.shape != self.shape_key() {
            return Err(Error::StaleCache(format!(
                "cache generation {} shape {:?}, layer generation {} shape {:?}",
                cache.generation,
                cache.shape,
                self.generation,
                self.shape_key()
            )));
        }
        if grad_out.len() != self.d_out() {
            return Err(Error::shape("layer_backward", (self.d_out(), 1), (grad_out.len(), 1)));
        }
        let n = self.num_experts();
        let scale = self.scale();
        let h = &cache.h;
        let mut grad_h = self.base.w0.matvec_t(grad_out)?;
        let mut grad_pa = Vector::zeros(n);
        for (i, expert) in self.experts.iter().enumerate() {
            let Some((u, v)) = &cache.low_rank[i] else {
                continue;
            };
            let w = cache.gate.adapted[i];
            grad_pa[i] = scale * grad_out.dot(v);
            if w == 0.0 {
                continue;
            }
            acc.b[i].add_outer(scale * w, grad_out, u)?;
            let gu = expert.b.matvec_t(grad_out)?.scaled(scale * w);
            acc.a[i].add_outer(1.0, &gu, h)?;
            grad_h.add_scaled(1.0, &expert.a.matvec_t(&gu)?)?;
        }

        let grad_pl = match self.gating {
            GatingMode::Hierarchical | GatingMode::LocalOnly | GatingMode::GlobalOnly => {
                let mut grad_pl = None;
                if let (Some(g), Some(p_g)) = (&cache.gate_g, &cache.p_g) {
                    let (_, gt) = masked_normalize_backward(p_g, &g.mask, self.tau_g.tau, &grad_pa);
                    acc.tau_g += gt;
                }
                if let (Some(l), Some(p_l)) = (&cache.gate_l, &cache.p_l) {
                    let (gp, gt) = masked_normalize_backward(p_l, &l.mask, self.tau_l.tau, &grad_pa);
                    acc.tau_l += gt;
                    grad_pl = Some(gp);
                }
                grad_pl
            }
            GatingMode::TopK { .. } => {
                let p_l = cache.p_l.as_ref().expect("router");
                Some(masked_normalize_backward(p_l, &cache.gate.mask, 1.0, &grad_pa).0)
            }
            GatingMode::DenseSoftmax => Some(grad_pa.scaled(0.5)),
            GatingMode::Plain => None,
        };

        if let (Some(gp), Some(p_l)) = (grad_pl, &cache.p_l) {
            let rg = self.local_router.backward_from_output(h, p_l, &gp)?;
            acc.wg.add_scaled(1.0, &rg.wg)?;
            grad_h.add_scaled(1.0, &rg.h)?;
        }
        Ok(grad_h)
    }

    /// Number of trainable scalars under the current gating mode.
    pub fn num_trainable(&self) -> usize {
        let experts: usize = self.experts.iter().map(LoraExpert::num_params).sum();
        let router = if self.gating.uses_local_router() {
            self.local_router.wg.len()
        } else {
            0
        };
        experts + router + self.gating.num_thresholds()
    }

    /// Visits parameters in registry order: experts, router, thresholds, then base.
    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ComponentTag, bool, &[f64])) {
        for (i, e) in self.experts.iter().enumerate() {
            f(&format!("{prefix}.expert{i}.a"), ComponentTag::Expert, true, e.a.as_slice());
            f(&format!("{prefix}.expert{i}.b"), ComponentTag::Expert, true, e.b.as_slice());
        }
        if self.gating.uses_local_router() {
            f(&format!("{prefix}.router"), ComponentTag::LocalRouter, true, self.local_router.wg.as_slice());
        }
        if self.gating.uses_tau_g() {
            f(&format!("{prefix}.tau_g"), ComponentTag::Threshold, true, std::slice::from_ref(&self.tau_g.tau));
        }
        if self.gating.uses_tau_l() {
            f(&format!("{prefix}.tau_l"), ComponentTag::Threshold, true, std::slice::from_ref(&self.tau_l.tau));
        }
        f(&format!("{prefix}.base.w0"), ComponentTag::Base, false, self.base.w0.as_slice());
        f(&format!("{prefix}.base.bias"), ComponentTag::Base, false, self.base.bias.as_slice());
    }

    /// Mutable visit over the trainable parameters only, in the same order as
    /// [`HdmoleLayer::visit_params`]. Bumps the cache generation.
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(ComponentTag, &mut [f64])) {
        self.touch();
        for e in &mut self.experts {
            f(ComponentTag::Expert, e.a.as_mut_slice());
            f(ComponentTag::Expert, e.b.as_mut_slice());
        }
        if self.gating.uses_local_router() {
            f(ComponentTag::LocalRouter, self.local_router.wg.as_mut_slice());
        }
        if self.gating.uses_tau_g() {
            f(ComponentTag::Threshold, std::slice::from_mut(&mut self.tau_g.tau));
        }
        if self.gating.uses_tau_l() {
            f(ComponentTag::Threshold, std::slice::from_mut(&mut self.tau_l.tau));
        }
    }

    pub fn clamp_thresholds(&mut self) {
        self.tau_g.clamp();
        self.tau_l.clamp();
    }
}

/// Routing intermediates exposed alongside the final gate.
#[derive(Debug, Clone)]
pub struct Gates {
    pub p_l: Option<Vector>,
    pub gate_g: Option<GateResult>,
    pub gate_l: Option<GateResult>,
}

impl LayerGrads {
    /// Visits gradients in the same order as [`HdmoleLayer::visit_trainable_mut`].
    pub fn visit<'a>(&'a self, gating: GatingMode, f: &mut dyn FnMut(&'a [f64])) {
        for (a, b) in self.a.iter().zip(&self.b) {
            f(a.as_slice());
            f(b.as_slice());
        }
        if gating.uses_local_router() {
            f(self.wg.as_slice());
        }
        if gating.uses_tau_g() {
            f(std::slice::from_ref(&self.tau_g));
        }
        if gating.uses_tau_l() {
            f(std::slice::from_ref(&self.tau_l));
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.a.iter_mut().chain(self.b.iter_mut()) {
            m.scale(s);
        }
        self.wg.scale(s);
        self.tau_g *= s;
        self.tau_l *= s;
    }
}

/// Activation statistics for one layer over an evaluation pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub samples_seen: u64,
    pub active_count_histogram: BTreeMap<usize, u64>,
    pub fallback_hits: u64,
    pub selection_counts: Vec<u64>,
}

impl LayerStats {
    pub fn new(num_experts: usize) -> Self {
        Self {
            selection_counts: vec![0; num_experts],
            ..Self::default()
        }
    }

    pub fn record(&mut self, gate: &GateResult) {
        self.samples_seen += 1;
        *self.active_count_histogram.entry(gate.active_count).or_insert(0) += 1;
        if gate.fallback {
            self.fallback_hits += 1;
        }
        if self.selection_counts.len() < gate.mask.len() {
            self.selection_counts.resize(gate.mask.len(), 0);
        }
        for (c, m) in self.selection_counts.iter_mut().zip(&gate.mask) {
            if *m {
                *c += 1;
            }
        }
    }

    pub fn mean_active(&self) -> f64 {
        if self.samples_seen == 0 {
            return 0.0;
        }
        let total: u64 = self
            .active_count_histogram
            .iter()
            .map(|(k, v)| *k as u64 * v)
            .sum();
        total as f64 / self.samples_seen as f64
    }

    /// Per-expert selection frequency in `[0, 1]`.
    pub fn utilization(&self) -> Vector {
        let n = self.samples_seen.max(1) as f64;
        self.selection_counts.iter().map(|c| *c as f64 / n).collect::<Vec<_>>().into()
    }

    pub fn merge(&mut self, other: &LayerStats) {
        self.samples_seen += other.samples_seen;
        self.fallback_hits += other.fallback_hits;
        for (k, v) in &other.active_count_histogram {
            *self.active_count_histogram.entry(*k).or_insert(0) += v;
        }
        if self.selection_counts.len() < other.selection_counts.len() {
            self.selection_counts.resize(other.selection_counts.len(), 0);
        }
        for (a, b) in self.selection_counts.iter_mut().zip(&other.selection_counts) {
            *a += b;
        }
    }
}

pub fn record_stats(stats: &mut LayerStats, gate: &GateResult) {
    stats.record(gate);
}
