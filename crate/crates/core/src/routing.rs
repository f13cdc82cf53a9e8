//! Global (frozen, per-sample) and local (trainable, per-input) routers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax, softmax_backward, Matrix, Vector};

/// Default smoothing applied to oracle one-hots.
pub const ORACLE_SMOOTHING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GlobalRouterKind {
    Oracle,
    NoisyOracle { accuracy: f64 },
    LearnedClassifier { weights: Matrix },
}

/// Stand-in for the frozen domain classifier that produces `P_g`.
///
/// Holds no trainable state; nothing here is ever registered with an optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRouter {
    kind: GlobalRouterKind,
    num_domains: usize,
    smoothing: f64,
}

impl GlobalRouter {
    pub fn new(kind: GlobalRouterKind, num_domains: usize, smoothing: f64) -> Result<Self> {
        if num_domains == 0 {
            return Err(Error::invalid("global router needs at least one domain"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("smoothing must be in [0, 1), got {smoothing}")));
        }
        match &kind {
            GlobalRouterKind::NoisyOracle { accuracy } => {
                if !(*accuracy > 0.0 && *accuracy <= 1.0) {
                    return Err(Error::invalid(format!(
                        "router accuracy must be in (0, 1], got {accuracy}"
                    )));
                }
            }
            GlobalRouterKind::LearnedClassifier { weights } => {
                if weights.rows() != num_domains {
                    return Err(Error::invalid(format!(
                        "classifier has {} outputs, expected {num_domains}",
                        weights.rows()
                    )));
                }
            }
            GlobalRouterKind::Oracle => {}
        }
        Ok(Self {
            kind,
            num_domains,
            smoothing,
        })
    }

    pub fn oracle(num_domains: usize) -> Result<Self> {
        Self::new(GlobalRouterKind::Oracle, num_domains, ORACLE_SMOOTHING)
    }

    pub fn noisy(num_domains: usize, accuracy: f64) -> Result<Self> {
        Self::new(
            GlobalRouterKind::NoisyOracle { accuracy },
            num_domains,
            ORACLE_SMOOTHING,
        )
    }

    pub fn kind(&self) -> &GlobalRouterKind {
        &self.kind
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    fn smoothed_one_hot(&self, hot: usize) -> Vector {
        let n = self.num_domains;
        if n == 1 {
            return Vector::filled(1, 1.0);
        }
        let off = self.smoothing / (n - 1) as f64;
        let mut p = Vector::filled(n, off);
        p[hot] = 1.0 - self.smoothing;
        p
    }

    /// Global weights for one sample.
    ///
    /// `true_domain` is the expert-aligned domain label, or `None` for samples
    /// from a domain with no dedicated expert; oracle variants answer those
    /// with the uniform posterior. The noisy oracle draws exactly one uniform
    /// and, on a miss, one wrong-domain index from `rng`.
    pub fn route(
        &self,
        features: &Vector,
        true_domain: Option<usize>,
        rng: &mut crate::rng::Rng,
    ) -> Result<Vector> {
        if let Some(d) = true_domain {
            if d >= self.num_domains {
                return Err(Error::invalid(format!(
                    "domain {d} out of range for {} domains",
                    self.num_domains
                )));
            }
        }
        let uniform = || Vector::filled(self.num_domains, 1.0 / self.num_domains as f64);
        match &self.kind {
            GlobalRouterKind::Oracle => Ok(true_domain.map_or_else(uniform, |d| self.smoothed_one_hot(d))),
            GlobalRouterKind::NoisyOracle { accuracy } => {
                let Some(d) = true_domain else {
                    return Ok(uniform());
                };
                let hit = rng.uniform() < *accuracy;
                if hit || self.num_domains == 1 {
                    Ok(self.smoothed_one_hot(d))
                } else {
                    let mut wrong = rng.below(self.num_domains - 1);
                    if wrong >= d {
                        wrong += 1;
                    }
                    Ok(self.smoothed_one_hot(wrong))
                }
            }
            GlobalRouterKind::LearnedClassifier { weights } => {
                Ok(softmax(&weights.matvec(features)?))
            }
        }
    }
}

/// Trainable linear gate `P_l = softmax(Wg·h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRouter {
    pub wg: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRouterGrads {
    pub wg: Matrix,
    pub h: Vector,
}

impl LocalRouter {
    pub fn zeros(num_experts: usize, d_in: usize) -> Self {
        Self {
            wg: Matrix::zeros(num_experts, d_in),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.wg.rows()
    }

    pub fn d_in(&self) -> usize {
        self.wg.cols()
    }

    pub fn route(&self, h: &Vector) -> Result<Vector> {
        Ok(softmax(&self.wg.matvec(h)?))
    }

    /// Vector-Jacobian product of [`LocalRouter::route`], given its output `p`.
    pub fn backward_from_output(
        &self,
        h: &Vector,
        p: &Vector,
        grad_p: &Vector,
    ) -> Result<LocalRouterGrads> {
        if grad_p.len() != self.num_experts() || h.len() != self.d_in() {
            return Err(Error::shape(
                "local_route_backward",
                self.wg.shape(),
                (grad_p.len(), h.len()),
            ));
        }
        let gz = softmax_backward(p, grad_p);
        let mut wg = Matrix::zeros(self.num_experts(), self.d_in());
        wg.add_outer(1.0, &gz, h)?;
        Ok(LocalRouterGrads {
            wg,
            h: self.wg.matvec_t(&gz)?,
        })
    }

    pub fn backward(&self, h: &Vector, grad_p: &Vector) -> Result<LocalRouterGrads> {
        let p = self.route(h)?;
        self.backward_from_output(h, &p, grad_p)
    }
}

/// Checks that `p` is a finite probability vector (sum within `1e-6` of one).
pub fn validate_probabilities(p: &Vector) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if !p.is_finite() {
        return Err(Error::NonFinite("probability vector"));
    }
    if p.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("negative probability"));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}
