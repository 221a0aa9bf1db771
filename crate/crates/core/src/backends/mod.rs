//! Text-generation, rating and token-embedding backends.
//!
//! Three kinds of text backend share one trait: a remote chat-completions
//! client, a script-driven mock that replays fixture text, and a heuristic
//! mock that synthesizes explanations and ratings from the prompt. Embedding
//! backends come in a remote and a hash-projection flavour.
//!
//! Backends are `Send + Sync` and hold no per-call mutable state, so one
//! instance serves every worker of a dataset run.

mod heuristic;
mod remote;
mod retry;
mod scripted;

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

pub use heuristic::{HashEmbedding, HeuristicEvaluator, HeuristicGenerator};
pub use remote::{
    ChatMessage, ChatRequest, HttpTransport, JsonTransport, RemoteChat, RemoteEmbedding, TransportFailure,
};
pub use retry::{ConcurrencyLimiter, LimiterPermit, RetryPolicy};
pub use scripted::{ScriptEntry, ScriptKind, ScriptedMock};

use crate::metrics::tokenize;
use crate::prompts::{render_evaluation, PromptError, PromptText};
use crate::types::{GenParams, Mcq, MAX_RATING};

/// Words-to-tokens factor used by the input-length guard.
pub const TOKENS_PER_WORD: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend response is malformed: {0}")]
    Malformed(String),
    #[error("model returned empty output")]
    EmptyOutput,
    #[error("prompt of ~{estimated_tokens} tokens exceeds the input limit of {limit}")]
    TruncationRisk { estimated_tokens: usize, limit: usize },
    #[error("no scripted {role} text for question `{mcq_id}` iteration {iteration} attempt {attempt}")]
    ScriptMiss {
        mcq_id: String,
        iteration: usize,
        role: &'static str,
        attempt: u32,
    },
    #[error("no number found in rating output {0:?}")]
    NoNumberFound(String),
    #[error("rating {0} is outside [0, 5]")]
    OutOfRange(f64),
    #[error("evaluation failed after {attempts} attempt(s); last error: {last}")]
    EvaluationFailed { attempts: u32, last: Box<BackendError> },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding backend returned {got} vectors for {expected} tokens")]
    EmbeddingCount { expected: usize, got: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl BackendError {
    /// Network or remote-service problems, as opposed to content problems.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::Status { .. })
    }

    /// Failures that another evaluation attempt may fix.
    fn is_retryable_rating(&self) -> bool {
        matches!(
            self,
            BackendError::NoNumberFound(_) | BackendError::OutOfRange(_) | BackendError::EmptyOutput
        )
    }
}

/// Identifies a call for script lookup and logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallContext<'a> {
    pub mcq_id: &'a str,
    /// 1-based loop iteration; 0 for calls outside the loop.
    pub iteration: usize,
    /// 0-based evaluation attempt within the iteration.
    pub attempt: u32,
}

impl<'a> CallContext<'a> {
    pub fn new(mcq_id: &'a str, iteration: usize) -> Self {
        Self {
            mcq_id,
            iteration,
            attempt: 0,
        }
    }
}

/// Text returned by a backend and how many requests it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

pub trait TextBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Largest accepted prompt in estimated tokens, if limited.
    fn max_input_tokens(&self) -> Option<usize> {
        None
    }

    fn complete(
        &self,
        prompt: &PromptText,
        params: &GenParams,
        ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;

    /// One raw vector per token, in order.
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

/// Rough token count: words × 1.3, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    (crate::ingest::word_count(text) as f64 * TOKENS_PER_WORD).ceil() as usize
}

/// Runs one generation call with the input-length guard and the
/// non-empty-output check. The returned text is trimmed.
pub fn generate_text(
    backend: &dyn TextBackend,
    prompt: &PromptText,
    params: &GenParams,
    ctx: &CallContext<'_>,
) -> Result<Completion, BackendError> {
    if let Some(limit) = backend.max_input_tokens() {
        let estimated_tokens = estimate_tokens(&prompt.text);
        if estimated_tokens > limit {
            return Err(BackendError::TruncationRisk {
                estimated_tokens,
                limit,
            });
        }
    }
    let completion = backend.complete(prompt, params, ctx)?;
    let text = completion.text.trim();
    if text.is_empty() {
        return Err(BackendError::EmptyOutput);
    }
    Ok(Completion {
        text: text.to_string(),
        attempts: completion.attempts,
    })
}

fn number_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").expect("valid regex"))
}

/// Takes the first decimal number in a model reply as the rating.
///
/// ```
/// use ilearner::backends::{parse_rating, BackendError};
///
/// assert_eq!(parse_rating("The quality rating score is 3.5."), Ok(3.5));
/// assert!(matches!(parse_rating("excellent question"), Err(BackendError::NoNumberFound(_))));
/// assert_eq!(parse_rating("7"), Err(BackendError::OutOfRange(7.0)));
/// ```
pub fn parse_rating(output: &str) -> Result<f64, BackendError> {
    let found = number_pattern()
        .find(output)
        .ok_or_else(|| BackendError::NoNumberFound(output.chars().take(80).collect()))?;
    let value: f64 = found
        .as_str()
        .parse()
        .map_err(|_| BackendError::NoNumberFound(found.as_str().to_string()))?;
    if !(0.0..=MAX_RATING).contains(&value) {
        return Err(BackendError::OutOfRange(value));
    }
    Ok(value)
}

/// A parsed rating and the number of evaluation attempts spent on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub value: f64,
    pub attempts: u32,
}

/// Asks the evaluator for a rating, retrying up to `retries` extra times when
/// the reply cannot be read as a number in `[0, 5]`. Transport and script
/// errors are returned immediately.
pub fn evaluate_explanation(
    backend: &dyn TextBackend,
    mcq: &Mcq,
    explanation: &str,
    params: &GenParams,
    retries: u32,
    iteration: usize,
) -> Result<Rating, BackendError> {
    let prompt = render_evaluation(mcq, explanation)?;
    let mut last = None;
    for attempt in 0..=retries {
        let ctx = CallContext {
            mcq_id: &mcq.id,
            iteration,
            attempt,
        };
        let outcome = generate_text(backend, &prompt, params, &ctx).and_then(|c| parse_rating(&c.text));
        match outcome {
            Ok(value) => {
                return Ok(Rating {
                    value,
                    attempts: attempt + 1,
                })
            }
            Err(e) if e.is_retryable_rating() => {
                tracing::debug!(mcq = %mcq.id, iteration, attempt, error = %e, "unusable rating, retrying");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(BackendError::EvaluationFailed {
        attempts: retries + 1,
        last: Box::new(last.unwrap_or(BackendError::EmptyOutput)),
    })
}

/// A token and its unit-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub token: String,
    pub vector: Vec<f64>,
}

/// Tokenizes `text` the same way BLEU does and embeds every token, scaling
/// each vector to unit length.
pub fn embed_tokens(backend: &dyn EmbeddingBackend, text: &str) -> Result<Vec<TokenEmbedding>, BackendError> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(BackendError::EmptyText);
    }
    let vectors = backend.embed(&tokens)?;
    if vectors.len() != tokens.len() {
        return Err(BackendError::EmbeddingCount {
            expected: tokens.len(),
            got: vectors.len(),
        });
    }
    Ok(tokens
        .into_iter()
        .zip(vectors)
        .map(|(token, mut vector)| {
            let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                vector.iter_mut().for_each(|x| *x /= norm);
            }
            TokenEmbedding { token, vector }
        })
        .collect())
}
