//! Embedding-space primitives shared by the loss heads, the trainers and the
//! verification scorer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as the zero vector.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Vectors whose computed norm is this close to 1 are already unit length.
const UNIT_NORM_TOL: f64 = 4.0 * f64::EPSILON;

/// Fixed-dimension encoder output. All components are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "embedding" });
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn normalized(&self) -> Result<Embedding> {
        l2_normalize(&self.0).map(Embedding)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A toy "face": a feature vector tagged with its identity and dense class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub identity_id: String,
    pub feature: Vec<f64>,
    pub label: usize,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > ZERO_NORM_EPS) {
        return Err(Error::ZeroVector { norm: n });
    }
    if (n - 1.0).abs() <= UNIT_NORM_TOL {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine of the angle between `a` and `b`, clamped into `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let ua = l2_normalize(a)?;
    let ub = l2_normalize(b)?;
    Ok(dot(&ua, &ub).clamp(-1.0, 1.0))
}

/// Squared Euclidean distance.
pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
