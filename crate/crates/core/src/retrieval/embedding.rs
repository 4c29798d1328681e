use serde::{Deserialize, Serialize};

use super::RetrievalError;

/// Maximum deviation from unit norm tolerated before a vector is rescaled.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm, finite embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Validates `values` and rescales them to unit norm when the norm is off
    /// by more than [`NORM_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(RetrievalError::ZeroVector);
        }
        let values = if (norm - 1.0).abs() > NORM_TOLERANCE {
            values.into_iter().map(|v| v / norm).collect()
        } else {
            values
        };
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64, RetrievalError> {
        cosine_similarity(&self.values, &other.values)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = RetrievalError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
