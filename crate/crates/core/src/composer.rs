//! Weighted sums of joint embeddings.

use crate::binder::{JointEmbedding, Source};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Below this norm a weighted sum is treated as cancelled out.
pub const MIN_NORM: f64 = 1e-6;

/// `normalize(Σ wᵢ·eᵢ)`, tagged as composed.
pub fn compose(embeddings: &[JointEmbedding], weights: &[f64]) -> Result<JointEmbedding> {
    compose_with(embeddings, weights, true)
}

/// Equal-weight composition.
pub fn compose_equal(embeddings: &[JointEmbedding]) -> Result<JointEmbedding> {
    compose(embeddings, &vec![1.0; embeddings.len()])
}

/// With `renormalize = false` the raw weighted sum is returned; it is then not
/// a valid [`JointEmbedding`] in general, so the vector comes back as a tensor.
pub fn weighted_sum(embeddings: &[JointEmbedding], weights: &[f64]) -> Result<Tensor> {
    let Some(first) = embeddings.first() else {
        return Err(Error::invalid("cannot compose an empty list"));
    };
    if weights.len() != embeddings.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} weights",
            embeddings.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::invalid("all weights are zero"));
    }
    let d = first.vector.numel();
    let mut acc = vec![0.0f64; d];
    for (e, w) in embeddings.iter().zip(weights) {
        if e.vector.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "compose",
                left: vec![d],
                right: e.vector.shape().to_vec(),
            });
        }
        for (a, v) in acc.iter_mut().zip(e.vector.data()) {
            *a += w * *v as f64;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(Error::invalid(format!(
            "weighted sum cancels out (norm {norm:.3e})"
        )));
    }
    Tensor::from_f64s(&[d], &acc)
}

pub fn compose_with(
    embeddings: &[JointEmbedding],
    weights: &[f64],
    renormalize: bool,
) -> Result<JointEmbedding> {
    let sum = weighted_sum(embeddings, weights)?;
    let scale = if renormalize { 1.0 / sum.norm() } else { 1.0 };
    let v: Vec<f64> = sum.data().iter().map(|x| *x as f64 * scale).collect();
    let vector = Tensor::from_f64s(&[v.len()], &v)?;
    if renormalize {
        JointEmbedding::new(vector, Source::Composed)
    } else {
        Ok(JointEmbedding {
            vector,
            source: Source::Composed,
        })
    }
}
