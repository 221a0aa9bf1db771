//! Deterministic stand-ins that need no fixtures: a generator that writes
//! longer explanations the more feedback it receives, a word-count rater, and
//! a hash-projection token embedder.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BackendError, CallContext, Completion, EmbeddingBackend, TextBackend};
use crate::prompts::{self, PromptRole, PromptText};
use crate::types::{GenParams, MAX_RATING};

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &byte in *part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const CONNECTIVES: &[&str] = &[
    "because",
    "therefore",
    "which",
    "means",
    "so",
    "this",
    "shows",
    "that",
    "the",
    "key",
    "idea",
    "is",
];

/// Builds an explanation from the question's own words. Each feedback line
/// in the prompt adds a sentence, so later iterations run longer.
#[derive(Debug, Clone)]
pub struct HeuristicGenerator {
    id: String,
    seed: u64,
}

impl HeuristicGenerator {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        Self { id: id.into(), seed }
    }
}

impl TextBackend for HeuristicGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        prompt: &PromptText,
        params: &GenParams,
        _ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        if prompt.role != PromptRole::Generation {
            return Err(BackendError::Malformed(
                "heuristic generator only answers generation prompts".into(),
            ));
        }
        let stem = prompts::extract_field(&prompt.text, prompts::QUESTION_LABEL).unwrap_or("");
        let answer = prompts::extract_field(&prompt.text, prompts::ANSWER_LABEL).unwrap_or("");
        let feedback = prompt.feedback_count();
        let seed = params.seed.unwrap_or(self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), prompt.text.as_bytes()]));

        let mut words: Vec<&str> = stem
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            words.push("question");
        }

        let mut text = format!("The correct answer is {answer}.");
        for _ in 0..=feedback {
            let mut sentence: Vec<&str> = Vec::new();
            let len = 8 + rng.random_range(0..6);
            for i in 0..len {
                if i % 3 == 2 {
                    sentence.push(CONNECTIVES.choose(&mut rng).copied().unwrap_or("so"));
                } else {
                    sentence.push(words.choose(&mut rng).copied().unwrap_or("question"));
                }
            }
            text.push(' ');
            text.push_str(&sentence.join(" "));
            text.push('.');
        }
        Ok(Completion { text, attempts: 1 })
    }
}

/// Rates an explanation as `min(5, words / words_per_point)`.
#[derive(Debug, Clone)]
pub struct HeuristicEvaluator {
    id: String,
    words_per_point: f64,
}

impl HeuristicEvaluator {
    pub fn new(id: impl Into<String>, words_per_point: f64) -> Self {
        Self {
            id: id.into(),
            words_per_point,
        }
    }

    pub fn rate(&self, explanation: &str) -> f64 {
        (crate::ingest::word_count(explanation) as f64 / self.words_per_point).min(MAX_RATING)
    }
}

impl TextBackend for HeuristicEvaluator {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        prompt: &PromptText,
        _params: &GenParams,
        _ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        let explanation = prompts::extract_explanation(&prompt.text)
            .ok_or_else(|| BackendError::Malformed("evaluation prompt has no Explanation line".into()))?;
        Ok(Completion {
            text: format!("{:.2}", self.rate(explanation)),
            attempts: 1,
        })
    }
}

/// Gives every distinct token a fixed pseudo-random unit vector derived
/// from a hash of the token and the seed.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    id: String,
    dim: usize,
    seed: u64,
}

impl HashEmbedding {
    pub fn new(id: impl Into<String>, dim: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            dim: dim.max(1),
            seed,
        }
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&self.seed.to_le_bytes(), token.as_bytes()]));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl EmbeddingBackend for HashEmbedding {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(tokens.iter().map(|t| self.vector(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{embed_tokens, evaluate_explanation, generate_text};
    use crate::prompts::{render_generation_initial, render_generation_refine_recent};
    use crate::types::Mcq;

    fn mcq() -> Mcq {
        Mcq::new(
            "q1",
            "Which organelle produces most cellular ATP?",
            "Mitochondrion",
            vec!["Ribosome".into()],
        )
        .unwrap()
    }

    #[test]
    fn word_count_rule() {
        let eval = HeuristicEvaluator::new("h", 20.0);
        let forty = vec!["w"; 40].join(" ");
        let r = evaluate_explanation(&eval, &mcq(), &forty, &GenParams::default(), 0, 1).unwrap();
        assert_eq!(r.value, 2.0);
        let many = vec!["w"; 400].join(" ");
        assert_eq!(eval.rate(&many), 5.0);
    }

    #[test]
    fn generator_is_deterministic_and_grows() {
        let generator = HeuristicGenerator::new("g", 7);
        let params = GenParams::default();
        let ctx = CallContext::new("q1", 1);
        let first = generate_text(&generator, &render_generation_initial(&mcq()), &params, &ctx).unwrap();
        let again = generate_text(&generator, &render_generation_initial(&mcq()), &params, &ctx).unwrap();
        assert_eq!(first, again);
        assert!(first.text.starts_with("The correct answer is Mitochondrion."));
        let refined = render_generation_refine_recent(&mcq(), &first.text, 2.0).unwrap();
        let second = generate_text(&generator, &refined, &params, &ctx).unwrap();
        assert!(crate::ingest::word_count(&second.text) > crate::ingest::word_count(&first.text));
    }

    #[test]
    fn mock_embeddings_repeat_per_token() {
        let emb = HashEmbedding::new("e", 16, 0);
        let out = embed_tokens(&emb, "a b a").unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].vector, out[2].vector);
        assert_ne!(out[0].vector, out[1].vector);
        for t in &out {
            let norm = t.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert_eq!(embed_tokens(&emb, ""), Err(BackendError::EmptyText));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(&[]), 0xcbf2_9ce4_8422_2325);
        assert_ne!(fnv1a(&[b"ab"]), fnv1a(&[b"a", b"b"]));
    }
}
