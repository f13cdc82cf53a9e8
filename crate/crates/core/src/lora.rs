//! Low-rank adapters over a frozen linear layer: `y = W0·x + (α/r)·B·A·x + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, Matrix, Vector};
use crate::rng::{gaussian_fill, Rng};

/// Std of the Gaussian used for `A` at initialization.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenLinear {
    pub w0: Matrix,
    pub bias: Vector,
}

/// Gradients of a plain linear layer. Only produced when the layer is
/// deliberately unfrozen (full fine-tuning baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub w: Matrix,
    pub bias: Vector,
    pub x: Vector,
}

impl FrozenLinear {
    pub fn new(w0: Matrix, bias: Vector) -> Result<Self> {
        if bias.len() != w0.rows() {
            return Err(Error::shape("FrozenLinear::new", w0.shape(), (bias.len(), 1)));
        }
        Ok(Self { w0, bias })
    }

    /// Random layer with `N(0, 1/d_in)` weights and zero bias.
    pub fn random(rng: &mut Rng, d_in: usize, d_out: usize) -> Result<Self> {
        let w0 = gaussian_fill(rng, d_out, d_in, 1.0 / (d_in as f64).sqrt())?;
        Self::new(w0, Vector::zeros(d_out))
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn num_params(&self) -> usize {
        self.w0.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let mut y = self.w0.matvec(x)?;
        y.add_scaled(1.0, &self.bias)?;
        Ok(y)
    }

    pub fn backward(&self, x: &Vector, grad_out: &Vector) -> Result<LinearGrads> {
        if grad_out.len() != self.d_out() {
            return Err(Error::shape("linear backward", self.w0.shape(), (grad_out.len(), 1)));
        }
        let mut w = Matrix::zeros(self.d_out(), self.d_in());
        w.add_outer(1.0, grad_out, x)?;
        Ok(LinearGrads {
            w,
            bias: grad_out.clone(),
            x: self.w0.matvec_t(grad_out)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub a: Matrix,
    pub b: Matrix,
    pub x: Vector,
}

impl LoraExpert {
    /// Fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`, so the delta starts at exactly zero.
    pub fn new(rng: &mut Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::invalid(format!(
                "rank {rank} must satisfy 0 < r < min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            a: gaussian_fill(rng, rank, d_in, LORA_INIT_STD)?,
            b: Matrix::zeros(d_out, rank),
            rank,
            alpha,
        })
    }

    /// Adapter with explicit factors; shapes must agree on the rank.
    pub fn from_factors(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::shape("LoraExpert::from_factors", a.shape(), b.shape()));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            rank: a.rows(),
            a,
            b,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Unscaled low-rank path: returns `(A·x, B·A·x)`.
    pub fn project(&self, x: &Vector) -> Result<(Vector, Vector)> {
        let u = self.a.matvec(x)?;
        let v = self.b.matvec(&u)?;
        Ok((u, v))
    }

    /// `ΔW = (α/r)·B·A`.
    pub fn delta_weight(&self) -> Result<Matrix> {
        let mut dw = matmul(&self.b, &self.a)?;
        dw.scale(self.scale());
        Ok(dw)
    }
}

fn check_pair(base: &FrozenLinear, expert: &LoraExpert) -> Result<()> {
    if base.d_in() != expert.d_in() || base.d_out() != expert.d_out() {
        return Err(Error::shape(
            "lora",
            base.w0.shape(),
            (expert.d_out(), expert.d_in()),
        ));
    }
    Ok(())
}

pub fn lora_forward(base: &FrozenLinear, expert: &LoraExpert, x: &Vector) -> Result<Vector> {
    check_pair(base, expert)?;
    let mut y = base.w0.matvec(x)?;
    let (_, v) = expert.project(x)?;
    y.add_scaled(expert.scale(), &v)?;
    y.add_scaled(1.0, &base.bias)?;
    Ok(y)
}

/// Gradients of `lora_forward` w.r.t. `A`, `B` and `x`. The base layer gets none.
pub fn lora_backward(
    base: &FrozenLinear,
    expert: &LoraExpert,
    x: &Vector,
    grad_out: &Vector,
) -> Result<LoraGrads> {
    check_pair(base, expert)?;
    if x.len() != base.d_in() || grad_out.len() != base.d_out() {
        return Err(Error::shape(
            "lora_backward",
            (x.len(), grad_out.len()),
            (base.d_in(), base.d_out()),
        ));
    }
    let s = expert.scale();
    let u = expert.a.matvec(x)?;
    let mut gb = Matrix::zeros(expert.d_out(), expert.rank);
    gb.add_outer(s, grad_out, &u)?;
    let gu = expert.b.matvec_t(grad_out)?.scaled(s);
    let mut ga = Matrix::zeros(expert.rank, expert.d_in());
    ga.add_outer(1.0, &gu, x)?;
    let mut gx = base.w0.matvec_t(grad_out)?;
    gx.add_scaled(1.0, &expert.a.matvec_t(&gu)?)?;
    Ok(LoraGrads { a: ga, b: gb, x: gx })
}

/// Folds the adapter into the base weights: `W0 + (α/r)·B·A`.
pub fn merge(base: &FrozenLinear, expert: &LoraExpert) -> Result<FrozenLinear> {
    check_pair(base, expert)?;
    let mut w0 = base.w0.clone();
    w0.add_scaled(1.0, &expert.delta_weight()?)?;
    FrozenLinear::new(w0, base.bias.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, d_in: usize, d_out: usize, r: usize) -> (FrozenLinear, LoraExpert, Rng) {
        let mut rng = Rng::new(seed);
        let mut base = FrozenLinear::random(&mut rng, d_in, d_out).unwrap();
        base.bias = rng.normal_vector(d_out, 0.5);
        let mut e = LoraExpert::new(&mut rng, d_in, d_out, r, 2.0).unwrap();
        e.a = gaussian_fill(&mut rng, r, d_in, 0.7).unwrap();
        e.b = gaussian_fill(&mut rng, d_out, r, 0.7).unwrap();
        (base, e, rng)
    }

    #[test]
    fn zero_init_delta_is_exactly_base() {
        let mut rng = Rng::new(1);
        let base = FrozenLinear::random(&mut rng, 6, 5).unwrap();
        let e = LoraExpert::new(&mut rng, 6, 5, 2, 4.0).unwrap();
        let x = rng.normal_vector(6, 1.0);
        assert_eq!(lora_forward(&base, &e, &x).unwrap(), base.forward(&x).unwrap());
    }

    #[test]
    fn scalar_hand_computation() {
        let base = FrozenLinear::new(Matrix::zeros(1, 2), Vector::zeros(1)).unwrap();
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let e = LoraExpert::from_factors(a, b, 1.0).unwrap();
        let y = lora_forward(&base, &e, &Vector::from(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.as_slice(), &[4.0]);
    }

    #[test]
    fn identity_padded_factors() {
        // d_in = d_out = 3, r = 2, alpha = r: delta projects x onto its first two coords.
        let w0 = Matrix::from_rows(&[
            vec![1.0, 0.0, 2.0],
            vec![0.0, -1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let base = FrozenLinear::new(w0, Vector::from(vec![0.5, 0.5, 0.5])).unwrap();
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let e = LoraExpert::from_factors(a, b, 2.0).unwrap();
        let y = lora_forward(&base, &e, &Vector::from(vec![1.0, 2.0, 3.0])).unwrap();
        // W0·x = [7, -2, 6]; projection = [1, 2, 0]; bias 0.5.
        assert_eq!(y.as_slice(), &[8.5, 0.5, 6.5]);
    }

    #[test]
    fn rank_must_be_below_min_dim() {
        let mut rng = Rng::new(0);
        assert!(LoraExpert::new(&mut rng, 4, 3, 3, 1.0).is_err());
        assert!(LoraExpert::new(&mut rng, 4, 3, 0, 1.0).is_err());
        assert!(LoraExpert::new(&mut rng, 4, 3, 2, 0.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (base, e, _) = setup(2, 4, 3, 1);
        assert!(lora_forward(&base, &e, &Vector::zeros(5)).is_err());
        assert!(lora_backward(&base, &e, &Vector::zeros(4), &Vector::zeros(4)).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let (base, e, mut rng) = setup(3, 5, 4, 2);
        let x = rng.normal_vector(5, 1.0);
        let g = lora_backward(&base, &e, &x, &Vector::zeros(4)).unwrap();
        assert!(g.a.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.b.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_b_gives_zero_grad_a() {
        let mut rng = Rng::new(4);
        let base = FrozenLinear::random(&mut rng, 5, 4).unwrap();
        let e = LoraExpert::new(&mut rng, 5, 4, 2, 2.0).unwrap();
        let x = rng.normal_vector(5, 1.0);
        let go = rng.normal_vector(4, 1.0);
        let g = lora_backward(&base, &e, &x, &go).unwrap();
        assert!(g.a.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.b.as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn merged_layer_matches_adapter_forward() {
        let (base, e, mut rng) = setup(5, 7, 6, 3);
        let merged = merge(&base, &e).unwrap();
        for _ in 0..20 {
            let x = rng.normal_vector(7, 1.0);
            let a = lora_forward(&base, &e, &x).unwrap();
            let b = merged.forward(&x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn merging_zero_expert_is_idempotent() {
        let mut rng = Rng::new(6);
        let base = FrozenLinear::random(&mut rng, 5, 5).unwrap();
        let e = LoraExpert::new(&mut rng, 5, 5, 2, 2.0).unwrap();
        let once = merge(&base, &e).unwrap();
        assert_eq!(once, base);
        assert_eq!(merge(&once, &e).unwrap(), once);
    }
}
