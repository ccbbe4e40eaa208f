//! Dense vector/matrix arithmetic and the probability primitives everything
//! else builds on. All arithmetic is `f64`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Floor applied to probabilities inside logarithms so one-hot-saturated
/// predictions cannot produce infinities. Clamp events are counted.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Counts how often a probability had to be floored inside a log.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicU64);

impl ClampCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn note(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector with fixed dimension and finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(CoreError::InvalidArgument("vector dimension must be > 0".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::InvalidArgument("vector entries must be finite".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self { data: (0..dim).map(f).collect() }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::InvalidArgument("matrix dimensions must be > 0".into()));
        }
        if data.len() != rows * cols {
            return Err(CoreError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
                context: "matrix storage length",
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::InvalidArgument("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        if rows.iter().any(|v| v.len() != c) {
            return Err(CoreError::InvalidArgument("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `M x` for a vector `x` of dimension `cols`.
    pub fn matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.cols, x.dim());
        Vector::from_fn(self.rows, |r| {
            self.row(r).iter().zip(x.as_slice()).map(|(m, v)| m * v).sum()
        })
    }

    /// `M^T x` for a vector `x` of dimension `rows`.
    pub fn matvec_transpose(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.rows, x.dim());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        Vector { data: out }
    }

    /// `self += scale * u v^T`
    pub fn add_scaled_outer(&mut self, scale: f64, u: &Vector, v: &Vector) {
        debug_assert_eq!(self.rows, u.dim());
        debug_assert_eq!(self.cols, v.dim());
        for r in 0..self.rows {
            let su = scale * u[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, vj) in row.iter_mut().zip(v.as_slice()) {
                *m += su * vj;
            }
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

// ---------------------------------------------------------------------------
// ProbVector
// ---------------------------------------------------------------------------

/// Categorical probability vector: non-negative entries summing to one
/// within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    data: Vec<f64>,
}

impl ProbVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(CoreError::InvalidArgument("probability vector must be non-empty".into()));
        }
        if data.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CoreError::InvalidArgument(
                "probability entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(CoreError::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(Self { data })
    }

    pub fn one_hot(class: usize, dim: usize) -> Result<Self> {
        if class >= dim {
            return Err(CoreError::InvalidArgument(format!(
                "one-hot class {class} out of range for dimension {dim}"
            )));
        }
        let mut data = vec![0.0; dim];
        data[class] = 1.0;
        Ok(Self { data })
    }

    pub fn uniform(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::InvalidArgument("probability vector must be non-empty".into()));
        }
        Ok(Self { data: vec![1.0 / dim as f64; dim] })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Index of the largest entry; ties broken by the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.data.iter().enumerate().skip(1) {
            if p > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// `self - other` as a plain vector (residuals are not probabilities).
    pub fn residual(&self, other: &ProbVector) -> Vector {
        Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Probability primitives
// ---------------------------------------------------------------------------

/// Temperature-scaled softmax with max-subtraction for stability.
pub fn softmax(logits: &Vector, temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let max = logits.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .as_slice()
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector { data: exps.into_iter().map(|e| e / sum).collect() })
}

/// `-ln p` with `p` floored at [`PROB_FLOOR`]; counts the clamp if it fires.
fn floored_neg_ln(p: f64, clamp: Option<&ClampCounter>) -> f64 {
    if p < PROB_FLOOR {
        if let Some(c) = clamp {
            c.note();
        }
        -PROB_FLOOR.ln()
    } else {
        -p.ln()
    }
}

/// Cross-entropy of a prediction against a hard label: `-ln pred[label]`.
pub fn cross_entropy(pred: &ProbVector, label: usize) -> Result<f64> {
    cross_entropy_counting(pred, label, None)
}

pub fn cross_entropy_counting(
    pred: &ProbVector,
    label: usize,
    clamp: Option<&ClampCounter>,
) -> Result<f64> {
    if label >= pred.dim() {
        return Err(CoreError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            pred.dim()
        )));
    }
    Ok(floored_neg_ln(pred[label], clamp))
}

/// `KL(target || pred) = sum_c target_c ln(target_c / pred_c)`, with
/// `0 ln(0/q) = 0` and `pred` floored at [`PROB_FLOOR`].
pub fn kl_divergence(target: &ProbVector, pred: &ProbVector) -> Result<f64> {
    kl_divergence_counting(target, pred, None)
}

pub fn kl_divergence_counting(
    target: &ProbVector,
    pred: &ProbVector,
    clamp: Option<&ClampCounter>,
) -> Result<f64> {
    if target.dim() != pred.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: target.dim(),
            got: pred.dim(),
            context: "kl_divergence",
        });
    }
    let mut sum = 0.0;
    for (&t, &q) in target.as_slice().iter().zip(pred.as_slice()) {
        if t > 0.0 {
            sum += t * (t.ln() + floored_neg_ln(q, clamp));
        }
    }
    // Floating-point roundoff can leave a tiny negative residue when the
    // distributions coincide.
    Ok(sum.max(0.0))
}

/// Cosine similarity of two same-shape buffers (vectors or flattened
/// matrices). Errors on zero-norm input.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context: "cosine_similarity",
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::UndefinedSimilarity);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `sum_c |a_c - b_c|`; at most 2 for probability vectors.
pub fn l1_distance(a: &ProbVector, b: &ProbVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
            context: "l1_distance",
        });
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).sum())
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}
