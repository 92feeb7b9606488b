//! Dense linear algebra and probability kernels shared by the pipeline.
//!
//! Everything is `f64`, row-major, and allocation-light. The kernels are
//! intentionally naive: shapes in this crate are desk-scale (tens to a few
//! hundred columns), so clarity wins over blocking or SIMD.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the reference distribution inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self + scale · other`, elementwise.
    pub fn add_scaled(&self, other: &Matrix, scale: f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("add_scaled shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("empty probability vector"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
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

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty input"));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("softmax input contains {v}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Log-softmax, same stabilisation as [`softmax`].
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax of empty input"));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("log_softmax input contains {v}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&l| l - lse).collect())
}

/// Layer normalisation without affine parameters: `(v - mean) / sqrt(var + eps)`
/// with the population variance. Constant input maps to all zeros.
pub fn layer_norm(v: &[f64], eps: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter().map(|x| (x - mean) * inv).collect()
}

/// `KL(p ‖ q)` in nats. `q` is floored at [`KL_FLOOR`]; terms with `p_i = 0`
/// contribute nothing.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!("kl_divergence length mismatch: {} vs {}", p.len(), q.len())));
    }
    let kl: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    // rounding can leave a few ulps below zero when p == q
    Ok(kl.max(0.0))
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective not finite around coordinate {i} ({fp}, {fm})")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `W · x`.
pub fn matvec(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::invalid(format!("matvec shape mismatch: {}x{} · {}", w.rows(), w.cols(), x.len())));
    }
    Ok(w.iter_rows().map(|row| dot(row, x)).collect())
}

/// `Wᵀ · y`.
pub fn matvec_transposed(w: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    if w.rows() != y.len() {
        return Err(Error::invalid(format!(
            "transposed matvec shape mismatch: ({}x{})ᵀ · {}",
            w.rows(),
            w.cols(),
            y.len()
        )));
    }
    let mut out = vec![0.0; w.cols()];
    for (row, &yi) in w.iter_rows().zip(y) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// An affine map `x ↦ W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} output rows",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        Self { weight: Matrix::identity(n), bias: vec![0.0; n] }
    }

    /// Gaussian weights scaled by `1/sqrt(in_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self { weight: Matrix::random(out_dim, in_dim, std, rng), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = matvec(&self.weight, x)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Flattened `[weight..., bias...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn from_flat_like(&self, flat: &[f64]) -> Affine {
        let n = self.weight.rows() * self.weight.cols();
        Affine {
            weight: Matrix { rows: self.weight.rows(), cols: self.weight.cols(), data: flat[..n].to_vec() },
            bias: flat[n..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetric_pair() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ln2() {
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logit_matches_high_precision() {
        // mpmath (50 digits): 1 / (1 + e^-1000) and e^-1000 / (1 + e^-1000)
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        // e^-1000 ≈ 5.08e-435 underflows to zero in f64
        assert_eq!(p[1], 0.0);
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let p = softmax(&logits).unwrap();
        let lp = log_softmax(&logits).unwrap();
        for (a, b) in p.as_slice().iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        assert_eq!(layer_norm(&[5.0, 5.0, 5.0], 1e-5), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_already_standardised() {
        let out = layer_norm(&[1.0, -1.0], 1e-12);
        assert!((out[0] - 1.0).abs() < 1e-11 && (out[1] + 1.0).abs() < 1e-11);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        // two-pass oracle written out independently
        let mut mean = 0.0;
        for x in &v {
            mean += x;
        }
        mean /= 16.0;
        let mut ss = 0.0;
        for x in &v {
            ss += (x - mean).powi(2);
        }
        let sd = (ss / 16.0 + 1e-5).sqrt();
        let out = layer_norm(&v, 1e-5);
        for (o, x) in out.iter().zip(&v) {
            assert!((o - (x - mean) / sd).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_fixtures() {
        let p = ProbVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let onehot = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let half = ProbVector::uniform(2).unwrap();
        assert!((kl_divergence(&onehot, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_extended_precision_value() {
        // Reference computed with mpmath at 50 digits for these exact inputs.
        let p = ProbVector::new(vec![0.05, 0.1, 0.15, 0.2, 0.1, 0.1, 0.2, 0.1]).unwrap();
        let q = ProbVector::new(vec![0.125; 8]).unwrap();
        let reference = 0.080277728097995760;
        assert!((kl_divergence(&p, &q).unwrap() - reference).abs() < 1e-15);
    }

    #[test]
    fn kl_length_mismatch() {
        let a = ProbVector::uniform(2).unwrap();
        let b = ProbVector::uniform(3).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kl_floors_zero_reference() {
        let p = ProbVector::uniform(2).unwrap();
        let q = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        let expected = 0.5 * (0.5f64.ln() - 0.0) + 0.5 * (0.5f64.ln() - KL_FLOOR.ln());
        assert!((kl - expected).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let r = finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn matvec_identity_and_zero() {
        let x = [1.0, -2.0, 3.5];
        assert_eq!(matvec(&Matrix::identity(3), &x).unwrap(), x.to_vec());
        assert_eq!(matvec(&Matrix::zeros(2, 3), &x).unwrap(), vec![0.0, 0.0]);
        assert!(matvec(&Matrix::zeros(2, 2), &x).is_err());
    }

    #[test]
    fn matvec_random_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Matrix::random(4, 3, 1.0, &mut rng);
        let x = [0.7, -1.1, 2.0];
        let y = matvec(&w, &x).unwrap();
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += w.as_slice()[i * 3 + j] * x[j];
            }
            assert!((y[i] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }
}
