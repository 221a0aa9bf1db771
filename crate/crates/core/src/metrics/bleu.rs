use std::collections::HashMap;

use super::tokenize;

/// Highest n-gram order scored.
pub const BLEU_MAX_ORDER: usize = 4;
/// Stand-in numerator for an n-gram order with no matches.
pub const BLEU_SMOOTHING_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence-level BLEU-4 on the 0–100 scale against a single reference.
///
/// Modified precisions use clipped counts; an order with zero matches gets
/// numerator [`BLEU_SMOOTHING_EPSILON`] over a denominator of at least one.
/// The brevity penalty is `exp(1 - r/c)` when the candidate is shorter than
/// the reference.
///
/// ```
/// use ilearner::metrics::bleu;
///
/// assert_eq!(bleu("the cat sat on the mat", "the cat sat on the mat"), 100.0);
/// assert_eq!(bleu("", "anything at all"), 0.0);
/// assert!((bleu("a b c d", "a b c d e") - 77.880).abs() < 1e-3);
/// ```
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    bleu_tokens(&tokenize(candidate), &tokenize(reference))
}

/// [`bleu`] over already tokenized text.
pub fn bleu_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=BLEU_MAX_ORDER {
        let reference_counts = ngram_counts(reference, n);
        let candidate_counts = ngram_counts(candidate, n);
        let matches: usize = candidate_counts
            .iter()
            .map(|(gram, &count)| count.min(reference_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1).max(1);
        let numerator = if matches == 0 {
            BLEU_SMOOTHING_EPSILON
        } else {
            matches as f64
        };
        log_precision_sum += (numerator / total as f64).ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    (100.0 * brevity * (log_precision_sum / BLEU_MAX_ORDER as f64).exp()).clamp(0.0, 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_hundred() {
        assert_eq!(bleu("the cat sat on the mat", "the cat sat on the mat"), 100.0);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(bleu("", "the cat"), 0.0);
        assert_eq!(bleu("", ""), 0.0);
    }

    #[test]
    fn brevity_penalty_only() {
        let expected = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((bleu("a b c d", "a b c d e") - expected).abs() < 1e-9);
    }

    #[test]
    fn clipping_limits_repeated_tokens() {
        // "the the the the" vs "the cat": unigram matches clipped to 1 of 4.
        let score = bleu("the the the the", "the cat");
        assert!(score < 1e-3, "{score}");
    }

    #[test]
    fn no_overlap_is_near_zero() {
        assert!(bleu("x y z w", "a b c d") < 1e-6);
    }
}
