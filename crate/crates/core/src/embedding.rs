use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbeddingError {
    #[error("embedding must have at least one dimension")]
    Empty,
    #[error("embedding entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// A finite vector in the shared visual-semantic space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self(values))
    }

    /// Unit vector along `axis`.
    pub fn one_hot(dim: usize, axis: usize) -> Self {
        assert!(axis < dim, "axis {axis} out of range for dim {dim}");
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64, EmbeddingError> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn check_dim(&self, other: &Embedding) -> Result<(), EmbeddingError> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(EmbeddingError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            })
        }
    }

    /// Copy scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// The two encoded views of one region: its crop, and the whole image blurred
/// everywhere except the region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRepresentation {
    pub crop_emb: Embedding,
    pub blur_emb: Embedding,
}

impl RegionRepresentation {
    pub fn new(crop_emb: Embedding, blur_emb: Embedding) -> Result<Self, EmbeddingError> {
        crop_emb.check_dim(&blur_emb)?;
        Ok(Self { crop_emb, blur_emb })
    }

    pub fn dim(&self) -> usize {
        self.crop_emb.dim()
    }
}
