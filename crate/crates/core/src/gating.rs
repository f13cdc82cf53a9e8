//! Turning routing probabilities into expert combination weights.
//!
//! [`threshold_gate`] keeps every expert whose probability clears a learnable
//! threshold `τ`, renormalizes the survivors, and rescales them by `τ`, so the
//! retained weights always sum to `τ` and `τ` receives gradient through that
//! final scaling. The indicator itself is treated as a constant in backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vector;
use crate::routing::validate_probabilities;

pub const TAU_MIN: f64 = 1e-6;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicThreshold {
    pub tau: f64,
}

impl DynamicThreshold {
    /// `τ = 1/N`: the largest entry of any N-way probability vector is at
    /// least `1/N`, so at least one expert clears the initial threshold.
    pub fn new(num_experts: usize) -> Self {
        Self {
            tau: 1.0 / num_experts as f64,
        }
    }

    /// Clamp into `(1e-6, 1]` after an optimizer step.
    pub fn clamp(&mut self) {
        self.tau = clamp_tau(self.tau);
    }
}

pub fn clamp_tau(tau: f64) -> f64 {
    if tau.is_nan() {
        TAU_MIN
    } else {
        tau.clamp(TAU_MIN, TAU_MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub adapted: Vector,
    pub mask: Vec<bool>,
    pub active_count: usize,
    /// Set when no entry cleared `τ` and the argmax was selected instead.
    pub fallback: bool,
}

impl GateResult {
    fn from_parts(adapted: Vector, mask: Vec<bool>, fallback: bool) -> Self {
        let active_count = mask.iter().filter(|m| **m).count();
        Self {
            adapted,
            mask,
            active_count,
            fallback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKGate {
    pub k: usize,
}

fn threshold_mask(p: &Vector, tau: f64) -> (Vec<bool>, bool) {
    let mut mask: Vec<bool> = p.iter().map(|v| *v >= tau).collect();
    if mask.iter().any(|m| *m) {
        (mask, false)
    } else {
        // Every maximizer, so an exact tie (e.g. a uniform posterior) stays symmetric.
        let top = p[p.argmax()];
        for (m, v) in mask.iter_mut().zip(p.iter()) {
            *m = *v == top;
        }
        (mask, true)
    }
}

fn masked_sum(p: &Vector, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for (v, m) in p.iter().zip(mask) {
        if *m {
            s += v;
        }
    }
    s
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("threshold must be in (0, 1], got {tau}")));
    }
    Ok(())
}

pub fn threshold_gate(p: &Vector, tau: DynamicThreshold) -> Result<GateResult> {
    validate_probabilities(p)?;
    check_tau(tau.tau)?;
    let (mask, fallback) = threshold_mask(p, tau.tau);
    let s = masked_sum(p, &mask);
    let adapted = p
        .iter()
        .zip(&mask)
        .map(|(v, m)| if *m { v / s * tau.tau } else { 0.0 })
        .collect::<Vec<_>>();
    Ok(GateResult::from_parts(adapted.into(), mask, fallback))
}

/// Straight-through backward of [`threshold_gate`]: returns `(dL/dp, dL/dτ)`.
pub fn threshold_gate_backward(
    p: &Vector,
    tau: DynamicThreshold,
    grad_adapted: &Vector,
) -> Result<(Vector, f64)> {
    validate_probabilities(p)?;
    check_tau(tau.tau)?;
    if grad_adapted.len() != p.len() {
        return Err(Error::shape(
            "threshold_gate_backward",
            (p.len(), 1),
            (grad_adapted.len(), 1),
        ));
    }
    let (mask, _) = threshold_mask(p, tau.tau);
    Ok(masked_normalize_backward(p, &mask, tau.tau, grad_adapted))
}

/// Backward of `a_i = m_i·p_i / Σ_j m_j·p_j · scale` with a constant mask.
/// Returns `(dL/dp, dL/dscale)`.
pub(crate) fn masked_normalize_backward(
    p: &Vector,
    mask: &[bool],
    scale: f64,
    grad: &Vector,
) -> (Vector, f64) {
    let s = masked_sum(p, mask);
    let mut weighted = 0.0;
    for ((g, v), m) in grad.iter().zip(p.iter()).zip(mask) {
        if *m {
            weighted += g * v;
        }
    }
    let weighted = weighted / s;
    let grad_p = grad
        .iter()
        .zip(mask)
        .map(|(g, m)| if *m { scale / s * (g - weighted) } else { 0.0 })
        .collect::<Vec<_>>();
    (grad_p.into(), weighted)
}

/// `P_a = P_ga + P_la`; the mask is the union of both supports.
pub fn combine_adapted(pga: &GateResult, pla: &GateResult) -> Result<GateResult> {
    if pga.adapted.len() != pla.adapted.len() {
        return Err(Error::shape(
            "combine_adapted",
            (pga.adapted.len(), 1),
            (pla.adapted.len(), 1),
        ));
    }
    let adapted = pga.adapted.add(&pla.adapted)?;
    let mask = pga.mask.iter().zip(&pla.mask).map(|(a, b)| *a || *b).collect();
    Ok(GateResult::from_parts(
        adapted,
        mask,
        pga.fallback || pla.fallback,
    ))
}

fn topk_mask(p: &Vector, k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps lower indices first among equal probabilities.
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut mask = vec![false; p.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn check_k(p: &Vector, gate: TopKGate) -> Result<()> {
    if gate.k < 1 || gate.k > p.len() {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {}, got {}",
            p.len(),
            gate.k
        )));
    }
    Ok(())
}

/// Keep the `k` largest entries and renormalize them to sum to one.
pub fn topk_gate(p: &Vector, gate: TopKGate) -> Result<GateResult> {
    validate_probabilities(p)?;
    check_k(p, gate)?;
    let mask = topk_mask(p, gate.k);
    let s = masked_sum(p, &mask);
    let adapted = p
        .iter()
        .zip(&mask)
        .map(|(v, m)| if *m { v / s } else { 0.0 })
        .collect::<Vec<_>>();
    Ok(GateResult::from_parts(adapted.into(), mask, false))
}

pub fn topk_gate_backward(p: &Vector, gate: TopKGate, grad_adapted: &Vector) -> Result<Vector> {
    validate_probabilities(p)?;
    check_k(p, gate)?;
    let mask = topk_mask(p, gate.k);
    Ok(masked_normalize_backward(p, &mask, 1.0, grad_adapted).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from(x.to_vec())
    }

    #[test]
    fn threshold_worked_example() {
        let g = threshold_gate(&v(&[0.4, 0.3, 0.2, 0.1]), DynamicThreshold { tau: 0.25 }).unwrap();
        assert_eq!(g.mask, vec![true, true, false, false]);
        assert!((g.adapted[0] - 0.4 / 0.7 * 0.25).abs() < 1e-15);
        assert!((g.adapted[1] - 0.3 / 0.7 * 0.25).abs() < 1e-15);
        assert!((g.adapted[0] - 0.142_857_142_857_142_85).abs() < 1e-12);
        assert!((g.adapted[1] - 0.107_142_857_142_857_14).abs() < 1e-12);
        assert_eq!(g.adapted[2], 0.0);
        assert_eq!(g.adapted[3], 0.0);
        assert_eq!(g.active_count, 2);
        assert!(!g.fallback);
    }

    #[test]
    fn threshold_uniform_selects_all() {
        let g = threshold_gate(&v(&[0.25; 4]), DynamicThreshold::new(4)).unwrap();
        assert_eq!(g.adapted.as_slice(), &[0.0625; 4]);
        assert_eq!(g.active_count, 4);
    }

    #[test]
    fn threshold_single_expert() {
        let g = threshold_gate(&v(&[1.0]), DynamicThreshold { tau: 1.0 }).unwrap();
        assert_eq!(g.adapted.as_slice(), &[1.0]);
    }

    #[test]
    fn threshold_fallback_picks_argmax() {
        let g = threshold_gate(&v(&[0.3, 0.45, 0.25]), DynamicThreshold { tau: 0.6 }).unwrap();
        assert!(g.fallback);
        assert_eq!(g.mask, vec![false, true, false]);
        assert_eq!(g.adapted.as_slice(), &[0.0, 0.6, 0.0]);
    }

    #[test]
    fn threshold_fallback_splits_exact_ties() {
        let g = threshold_gate(&v(&[0.25; 4]), DynamicThreshold { tau: 0.4 }).unwrap();
        assert!(g.fallback);
        assert_eq!(g.active_count, 4);
        assert_eq!(g.adapted.as_slice(), &[0.1; 4]);
        let g = threshold_gate(&v(&[0.4, 0.4, 0.2]), DynamicThreshold { tau: 0.5 }).unwrap();
        assert_eq!(g.mask, vec![true, true, false]);
        assert_eq!(g.adapted.as_slice(), &[0.25, 0.25, 0.0]);
    }

    #[test]
    fn threshold_rejects_invalid_inputs() {
        let t = DynamicThreshold { tau: 0.3 };
        assert!(matches!(
            threshold_gate(&v(&[0.5, 0.6]), t),
            Err(Error::NotNormalized { .. })
        ));
        assert!(matches!(
            threshold_gate(&v(&[f64::NAN, 0.5]), t),
            Err(Error::NonFinite(_))
        ));
        assert!(threshold_gate(&v(&[0.5, 0.5]), DynamicThreshold { tau: 0.0 }).is_err());
    }

    #[test]
    fn backward_zero_upstream() {
        let (gp, gt) = threshold_gate_backward(
            &v(&[0.4, 0.3, 0.2, 0.1]),
            DynamicThreshold { tau: 0.25 },
            &Vector::zeros(4),
        )
        .unwrap();
        assert!(gp.iter().all(|x| *x == 0.0));
        assert_eq!(gt, 0.0);
    }

    #[test]
    fn backward_tau_gradient_formula() {
        let p = v(&[0.4, 0.3, 0.2, 0.1]);
        let g = v(&[1.0, -2.0, 3.0, 0.5]);
        let (_, gt) = threshold_gate_backward(&p, DynamicThreshold { tau: 0.25 }, &g).unwrap();
        let want = (1.0 * 0.4 + -2.0 * 0.3) / 0.7;
        assert!((gt - want).abs() < 1e-15);
    }

    #[test]
    fn backward_full_mask_jacobian() {
        // All selected, Σp = 1: a = τ·p/Σp, so dL/dp_k = τ(g_k − Σ_i g_i p_i).
        let p = v(&[0.3, 0.3, 0.4]);
        let tau = 0.2;
        let g = v(&[0.7, -1.0, 2.0]);
        let (gp, _) = threshold_gate_backward(&p, DynamicThreshold { tau }, &g).unwrap();
        let inner = 0.7 * 0.3 - 0.3 + 0.8;
        for k in 0..3 {
            assert!((gp[k] - tau * (g[k] - inner)).abs() < 1e-14);
        }
    }

    #[test]
    fn combine_sums_and_unions() {
        let pga = threshold_gate(&v(&[0.4, 0.3, 0.2, 0.1]), DynamicThreshold { tau: 0.25 }).unwrap();
        let pla = GateResult::from_parts(
            v(&[0.0, 0.125, 0.125, 0.0]),
            vec![false, true, true, false],
            false,
        );
        let pa = combine_adapted(&pga, &pla).unwrap();
        let want = [0.4 / 0.7 * 0.25, 0.3 / 0.7 * 0.25 + 0.125, 0.125, 0.0];
        for (a, b) in pa.adapted.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(pa.mask, vec![true, true, true, false]);
        assert_eq!(pa.active_count, 3);
        assert_eq!(pa.adapted[3], 0.0);
    }

    #[test]
    fn combine_length_mismatch() {
        let a = threshold_gate(&v(&[0.5, 0.5]), DynamicThreshold { tau: 0.5 }).unwrap();
        let b = threshold_gate(&v(&[1.0]), DynamicThreshold { tau: 0.5 }).unwrap();
        assert!(combine_adapted(&a, &b).is_err());
    }

    #[test]
    fn topk_examples() {
        let g = topk_gate(&v(&[0.5, 0.3, 0.2]), TopKGate { k: 2 }).unwrap();
        assert!((g.adapted[0] - 0.625).abs() < 1e-15);
        assert!((g.adapted[1] - 0.375).abs() < 1e-15);
        assert_eq!(g.adapted[2], 0.0);

        let p = v(&[0.5, 0.3, 0.2]);
        let g = topk_gate(&p, TopKGate { k: 3 }).unwrap();
        assert!(g.adapted.max_abs_diff(&p) < 1e-15);

        let g = topk_gate(&v(&[0.4, 0.4, 0.2]), TopKGate { k: 1 }).unwrap();
        assert_eq!(g.adapted.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_rejects_bad_k() {
        let p = v(&[0.5, 0.5]);
        assert!(topk_gate(&p, TopKGate { k: 0 }).is_err());
        assert!(topk_gate(&p, TopKGate { k: 3 }).is_err());
    }

    #[test]
    fn clamp_keeps_tau_in_range() {
        let mut t = DynamicThreshold { tau: 1.7 };
        t.clamp();
        assert_eq!(t.tau, 1.0);
        t.tau = -0.2;
        t.clamp();
        assert_eq!(t.tau, TAU_MIN);
    }
}
