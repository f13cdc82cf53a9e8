//! Dense row-major matrices and vectors over `f64`.
//!
//! Every reduction accumulates sequentially in index order, so results are
//! bit-reproducible and match a naive loop exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", self.shape(), (x.len(), 1)));
        }
        let xs = x.as_slice();
        let out = (0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for (w, v) in self.row(r).iter().zip(xs) {
                    acc += w * v;
                }
                acc
            })
            .collect();
        Ok(Vector(out))
    }

    /// `selfᵀ · y`, accumulated over rows in order.
    pub fn matvec_t(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(Error::shape("matvec_t", self.shape(), (y.len(), 1)));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.as_slice().iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(Vector(out))
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &Vector, v: &Vector) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::shape("add_outer", self.shape(), (u.len(), v.len())));
        }
        let cols = self.cols;
        for (r, &ur) in u.as_slice().iter().enumerate() {
            let s = scale * ur;
            for (d, &vc) in self.data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(v.as_slice())
            {
                *d += s * vc;
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|d| *d = v);
    }
}

/// Standard matrix product with sequential accumulation over the inner index.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &Vector) -> Vector {
    let max = z.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.0.iter().map(|v| (v - max).exp()).collect();
    let mut sum = 0.0;
    for e in &exps {
        sum += e;
    }
    Vector(exps.into_iter().map(|e| e / sum).collect())
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dL/dp`,
/// returns `dL/dz = p ⊙ (g − ⟨p, g⟩)`.
pub fn softmax_backward(p: &Vector, grad_p: &Vector) -> Vector {
    let inner = p.dot(grad_p);
    Vector(
        p.0.iter()
            .zip(&grad_p.0)
            .map(|(pi, gi)| pi * (gi - inner))
            .collect(),
    )
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, v: f64) -> Self {
        Vector(vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            acc += a * b;
        }
        acc
    }

    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.0 {
            acc += v;
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Vector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape("add_scaled", (self.len(), 1), (other.len(), 1)));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        let mut out = self.clone();
        out.add_scaled(1.0, other)?;
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn hadamard(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_fill, Rng};

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(3);
        let a = gaussian_fill(&mut rng, 3, 5, 1.0).unwrap();
        let b = gaussian_fill(&mut rng, 5, 2, 1.0).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert_eq!(g.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn matvec_agrees_with_matmul() {
        let mut rng = Rng::new(9);
        let a = gaussian_fill(&mut rng, 4, 6, 1.0).unwrap();
        let x = gaussian_fill(&mut rng, 6, 1, 1.0).unwrap();
        let via_mm = matmul(&a, &x).unwrap();
        let via_mv = a.matvec(&Vector::from(x.as_slice().to_vec())).unwrap();
        assert_eq!(via_mm.as_slice(), via_mv.as_slice());
        let at = a.transpose();
        let y = Vector::from(vec![1.0, -2.0, 0.5, 3.0]);
        let t1 = a.matvec_t(&y).unwrap();
        let t2 = at.matvec(&y).unwrap();
        assert!(t1.max_abs_diff(&t2) < 1e-14);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&Vector::from(vec![0.0; 4]));
        assert_eq!(p.as_slice(), &[0.25; 4]);
        let p = softmax(&Vector::from(vec![1000.0, 0.0]));
        assert!(p.is_finite());
        assert!((p[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // e^1, e^2, e^3 normalised; reference values computed with 50-digit arithmetic.
        let want = [
            0.090_030_573_170_380_458_f64,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_89,
        ];
        let p = softmax(&Vector::from(vec![1.0, 2.0, 3.0]));
        for (g, w) in p.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}
