use serde::{Deserialize, Serialize};

/// Width of every audio and text embedding.
pub const EMBED_DIM: usize = 512;

/// A fixed-width embedding vector.
///
/// Stored in single precision, as on disk. Networks widen to `f64` on use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    /// L2-normalises `values` and rounds to single precision. A zero vector
    /// stays zero.
    pub fn normalized(values: &[f64]) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        Self(values.iter().map(|v| (v * scale) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        crate::numkit::ops::cosine(&self.to_f64(), &other.to_f64())
    }
}
