//! Similarity and error metrics, plus the normalized average used to pick
//! the best iteration of a run.

mod bleu;
mod embedding;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, bleu_tokens, BLEU_MAX_ORDER, BLEU_SMOOTHING_EPSILON};
pub use embedding::{embedding_f1, EmbeddingScore};

use crate::types::MAX_RATING;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("length mismatch: {left} predictions vs {right} truths")]
    LengthMismatch { left: usize, right: usize },
}

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Mean squared error between predicted and ground-truth ratings.
pub fn mse(predictions: &[f64], truths: &[f64]) -> Result<f64, MetricError> {
    if predictions.len() != truths.len() {
        return Err(MetricError::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty("prediction list"));
    }
    let sum: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predictions.len() as f64)
}

/// Rating (0–5), BLEU (0–100) and embedding F1 (-100–100) of one explanation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub rating: f64,
    pub bleu: f64,
    pub embed_f1: f64,
}

impl MetricTriple {
    pub fn new(rating: f64, bleu: f64, embed_f1: f64) -> Self {
        Self { rating, bleu, embed_f1 }
    }
}

/// Maps each component onto `[0, 1]`. Negative embedding scores count as 0.
pub fn normalize_triple(triple: MetricTriple) -> [f64; 3] {
    [
        (triple.rating / MAX_RATING).clamp(0.0, 1.0),
        (triple.bleu / 100.0).clamp(0.0, 1.0),
        (triple.embed_f1.max(0.0) / 100.0).clamp(0.0, 1.0),
    ]
}

/// Unweighted mean of the normalized components.
pub fn normalized_average(triple: MetricTriple) -> f64 {
    normalize_triple(triple).iter().sum::<f64>() / 3.0
}
