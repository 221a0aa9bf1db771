use serde::{Deserialize, Serialize};

use super::MetricError;

/// Greedy-matching precision, recall and F1, each scaled to -100..=100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

fn mean_best_match(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|u| to.iter().map(|v| cosine(u, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / from.len() as f64
}

/// Token-level greedy matching between two embedding sequences.
///
/// Each candidate token is paired with its most similar reference token
/// (precision) and vice versa (recall); F1 is their harmonic mean when both
/// are positive and 0 otherwise. No baseline rescaling or IDF weighting.
///
/// ```
/// use ilearner::metrics::embedding_f1;
///
/// let candidate = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
/// let reference = vec![vec![1.0, 0.0]];
/// let score = embedding_f1(&candidate, &reference).unwrap();
/// assert_eq!((score.precision, score.recall), (50.0, 100.0));
/// assert!((score.f1 - 66.667).abs() < 1e-3);
/// ```
pub fn embedding_f1(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<EmbeddingScore, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::Empty("candidate embedding list"));
    }
    if reference.is_empty() {
        return Err(MetricError::Empty("reference embedding list"));
    }
    let dim = candidate[0].len();
    if let Some(bad) = candidate.iter().chain(reference).find(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch {
            left: dim,
            right: bad.len(),
        });
    }

    let precision = mean_best_match(candidate, reference);
    let recall = mean_best_match(reference, candidate);
    let f1 = if precision > 0.0 && recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EmbeddingScore {
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_score_hundred() {
        let x = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let s = embedding_f1(&x, &x).unwrap();
        assert!((s.f1 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_scores_zero() {
        let s = embedding_f1(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mixed_case() {
        let s = embedding_f1(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(s.precision, 50.0);
        assert_eq!(s.recall, 100.0);
        assert!((s.f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn negative_similarity_gives_zero_f1() {
        let s = embedding_f1(&[vec![1.0, 0.0]], &[vec![-1.0, 0.0]]).unwrap();
        assert_eq!(s.precision, -100.0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(embedding_f1(&[], &[vec![1.0]]), Err(MetricError::Empty(_))));
        assert!(matches!(embedding_f1(&[vec![1.0]], &[]), Err(MetricError::Empty(_))));
        assert_eq!(
            embedding_f1(&[vec![1.0, 0.0]], &[vec![1.0]]),
            Err(MetricError::DimensionMismatch { left: 2, right: 1 })
        );
    }
}
