//! Classifier-side numeric primitives: softmax, cross-entropy, top-k ranking
//! and the compound-scaling calculator.

use thiserror::Error;

/// Probability floor applied before taking a logarithm in [`cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a [`ProbVector`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("vector needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("probability vector invalid: {0}")]
    NotAProbability(String),
    #[error("k = {k} outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("scaling base {0} must be >= 1")]
    BadBase(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MathError> {
        if values.len() < 2 {
            return Err(MathError::TooShort(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MathError> {
        if values.len() < 2 {
            return Err(MathError::TooShort(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(MathError::NotAProbability(format!(
                "entry {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(MathError::NotAProbability(format!("sum is {sum}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax with max-subtraction.
pub fn softmax(z: &LogitVector) -> ProbVector {
    let max = z.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.0.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / total).collect())
}

/// Categorical cross-entropy against a one-hot truth vector, with the
/// true-class probability floored at [`LOG_FLOOR`].
pub fn cross_entropy(truth: &[f64], probs: &ProbVector) -> Result<f64, MathError> {
    if truth.len() != probs.len() {
        return Err(MathError::ShapeMismatch(format!(
            "truth has {} entries, probabilities {}",
            truth.len(),
            probs.len()
        )));
    }
    let ones: Vec<usize> = truth
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = truth.iter().filter(|v| **v == 0.0).count();
    if ones.len() != 1 || zeros + 1 != truth.len() {
        return Err(MathError::ShapeMismatch("truth is not one-hot".to_owned()));
    }
    let p = probs.0[ones[0]].max(LOG_FLOOR);
    // -ln(1) is -0.0; normalize so callers see a plain zero.
    Ok((-p.ln()).max(0.0))
}

/// The `k` most probable classes, descending, ties by ascending index.
pub fn top_k(p: &ProbVector, k: usize) -> Result<Vec<(usize, f64)>, MathError> {
    let n = p.len();
    if k == 0 || k > n {
        return Err(MathError::BadK { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p.0[b].total_cmp(&p.0[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|i| (i, p.0[i])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompoundScaling {
    pub depth: f64,
    pub width: f64,
    pub resolution: f64,
    /// `|α·β²·γ² − 2|`
    pub constraint_residual: f64,
}

/// Depth, width and resolution multipliers for scaling coefficient `phi`.
pub fn compound_scaling(phi: f64, alpha: f64, beta: f64, gamma: f64) -> Result<CompoundScaling, MathError> {
    for base in [alpha, beta, gamma] {
        if !base.is_finite() || base < 1.0 {
            return Err(MathError::BadBase(base));
        }
    }
    Ok(CompoundScaling {
        depth: alpha.powf(phi),
        width: beta.powf(phi),
        resolution: gamma.powf(phi),
        constraint_residual: (alpha * beta * beta * gamma * gamma - 2.0).abs(),
    })
}
