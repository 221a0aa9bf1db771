//! Experiment manifest: loop settings plus one descriptor per backend slot.
//!
//! ```toml
//! iterations = 6
//! history_mode = "all_history"
//! concurrency = 4
//! evaluation_retries = 2
//!
//! [generation]
//! temperature = 0.0
//! max_output_tokens = 512
//!
//! [generator]
//! id = "gpt4"
//! kind = "remote_chat"
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-4"
//! max_input_tokens = 8192
//!
//! [evaluator]
//! id = "rater"
//! kind = "scripted_mock"
//! script = "fixtures/script.jsonl"
//!
//! [embedding]
//! id = "hash"
//! kind = "embedding_mock"
//! dim = 64
//! ```
//!
//! Relative paths resolve against the config file's directory. Remote
//! backends read their API key from `api_key_env`, defaulting to
//! `ILEARNER_<ID>_API_KEY`.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::{
    ConcurrencyLimiter, EmbeddingBackend, HashEmbedding, HeuristicEvaluator, HeuristicGenerator, HttpTransport,
    RemoteChat, RemoteEmbedding, RetryPolicy, ScriptedMock, TextBackend,
};
use crate::error::ConfigError;
use crate::refine::Backends;
use crate::types::{GenParams, HistoryMode, LoopConfig, DEFAULT_ITERATIONS};

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}
fn default_concurrency() -> usize {
    1
}
fn default_retries() -> u32 {
    2
}
fn default_timeout() -> u64 {
    120
}
fn default_words_per_point() -> f64 {
    20.0
}
fn default_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    RemoteChat {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        max_input_tokens: Option<usize>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
    ScriptedMock {
        script: PathBuf,
    },
    HeuristicMock {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_words_per_point")]
        words_per_point: f64,
    },
    EmbeddingRemote {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
    EmbeddingMock {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub history_mode: HistoryMode,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_retries")]
    pub evaluation_retries: u32,
    #[serde(default)]
    pub generation: GenParams,
    pub generator: BackendDescriptor,
    pub evaluator: BackendDescriptor,
    #[serde(default)]
    pub embedding: Option<BackendDescriptor>,
}

/// Which slot a descriptor fills; the heuristic mock behaves differently in each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Generator,
    Evaluator,
}

fn api_key(id: &str, explicit: Option<&str>) -> Result<Option<String>, ConfigError> {
    match explicit {
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| ConfigError::MissingApiKey(var.to_string())),
        None => Ok(std::env::var(default_key_var(id)).ok()),
    }
}

/// `ILEARNER_<ID>_API_KEY` with the id upper-cased and non-alphanumerics as `_`.
pub fn default_key_var(id: &str) -> String {
    let id: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("ILEARNER_{id}_API_KEY")
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for slot in [
            Some(&mut config.generator),
            Some(&mut config.evaluator),
            config.embedding.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if let BackendKind::ScriptedMock { script } = &mut slot.kind {
                if script.is_relative() {
                    *script = base.join(&*script);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.loop_config().validate()?;
        for d in [&self.generator, &self.evaluator] {
            if matches!(
                d.kind,
                BackendKind::EmbeddingMock { .. } | BackendKind::EmbeddingRemote { .. }
            ) {
                return Err(ConfigError::Invalid(format!(
                    "backend `{}` is an embedding backend",
                    d.id
                )));
            }
        }
        if let Some(d) = &self.embedding {
            if !matches!(
                d.kind,
                BackendKind::EmbeddingMock { .. } | BackendKind::EmbeddingRemote { .. }
            ) {
                return Err(ConfigError::Invalid(format!(
                    "backend `{}` cannot produce embeddings",
                    d.id
                )));
            }
        }
        for d in [Some(&self.generator), Some(&self.evaluator), self.embedding.as_ref()]
            .into_iter()
            .flatten()
        {
            match &d.kind {
                BackendKind::RemoteChat { retry, .. } | BackendKind::EmbeddingRemote { retry, .. } => {
                    retry.validate()?
                }
                BackendKind::HeuristicMock { words_per_point, .. }
                    if words_per_point.is_nan() || *words_per_point <= 0.0 =>
                {
                    return Err(ConfigError::Invalid("words_per_point must be > 0".into()))
                }
                BackendKind::EmbeddingMock { dim: 0, .. } => {
                    return Err(ConfigError::Invalid("embedding dim must be >= 1".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            iterations: self.iterations,
            history_mode: self.history_mode,
            generator_id: self.generator.id.clone(),
            evaluator_id: self.evaluator.id.clone(),
            params: self.generation.clone(),
            evaluation_retries: self.evaluation_retries,
            concurrency: self.concurrency,
        }
    }

    /// Instantiates the configured backends. Remote backends share one
    /// limiter sized to `concurrency`.
    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        let limiter = Arc::new(ConcurrencyLimiter::new(self.concurrency));
        Ok(Backends {
            generator: build_text(&self.generator, Slot::Generator, &limiter)?,
            evaluator: build_text(&self.evaluator, Slot::Evaluator, &limiter)?,
            embedder: self
                .embedding
                .as_ref()
                .map(|d| build_embedding(d, &limiter))
                .transpose()?,
        })
    }

    /// Evaluator slot only, for benchmarking.
    pub fn build_evaluator(&self) -> Result<Arc<dyn TextBackend>, ConfigError> {
        build_text(
            &self.evaluator,
            Slot::Evaluator,
            &Arc::new(ConcurrencyLimiter::new(self.concurrency)),
        )
    }

    pub fn build_embedder(&self) -> Result<Option<Arc<dyn EmbeddingBackend>>, ConfigError> {
        let limiter = Arc::new(ConcurrencyLimiter::new(self.concurrency));
        self.embedding
            .as_ref()
            .map(|d| build_embedding(d, &limiter))
            .transpose()
    }
}

fn transport(endpoint: &str, id: &str, key_env: Option<&str>, timeout: u64) -> Result<Box<HttpTransport>, ConfigError> {
    let key = api_key(id, key_env)?;
    if key.is_none() {
        tracing::warn!(backend = id, var = %default_key_var(id), "no API key set; sending unauthenticated requests");
    }
    HttpTransport::new(endpoint, key, Duration::from_secs(timeout))
        .map(Box::new)
        .map_err(|e| ConfigError::Invalid(e.to_string()))
}

fn build_text(
    d: &BackendDescriptor,
    slot: Slot,
    limiter: &Arc<ConcurrencyLimiter>,
) -> Result<Arc<dyn TextBackend>, ConfigError> {
    Ok(match &d.kind {
        BackendKind::RemoteChat {
            endpoint,
            model,
            api_key_env,
            max_input_tokens,
            timeout_secs,
            retry,
        } => Arc::new(
            RemoteChat::new(
                &d.id,
                model,
                transport(endpoint, &d.id, api_key_env.as_deref(), *timeout_secs)?,
            )
            .with_retry(*retry)
            .with_limiter(Arc::clone(limiter))
            .with_max_input_tokens(*max_input_tokens),
        ),
        BackendKind::ScriptedMock { script } => {
            let file = File::open(script).map_err(|source| ConfigError::Read {
                path: script.clone(),
                source,
            })?;
            Arc::new(
                ScriptedMock::from_reader(&d.id, file)
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", script.display())))?,
            )
        }
        BackendKind::HeuristicMock { seed, words_per_point } => match slot {
            Slot::Generator => Arc::new(HeuristicGenerator::new(&d.id, *seed)),
            Slot::Evaluator => Arc::new(HeuristicEvaluator::new(&d.id, *words_per_point)),
        },
        BackendKind::EmbeddingRemote { .. } | BackendKind::EmbeddingMock { .. } => {
            return Err(ConfigError::Invalid(format!(
                "backend `{}` is an embedding backend",
                d.id
            )))
        }
    })
}

fn build_embedding(
    d: &BackendDescriptor,
    limiter: &Arc<ConcurrencyLimiter>,
) -> Result<Arc<dyn EmbeddingBackend>, ConfigError> {
    Ok(match &d.kind {
        BackendKind::EmbeddingMock { dim, seed } => Arc::new(HashEmbedding::new(&d.id, *dim, *seed)),
        BackendKind::EmbeddingRemote {
            endpoint,
            model,
            api_key_env,
            timeout_secs,
            retry,
        } => Arc::new(
            RemoteEmbedding::new(
                &d.id,
                model,
                transport(endpoint, &d.id, api_key_env.as_deref(), *timeout_secs)?,
            )
            .with_retry(*retry)
            .with_limiter(Arc::clone(limiter)),
        ),
        _ => {
            return Err(ConfigError::Invalid(format!(
                "backend `{}` cannot produce embeddings",
                d.id
            )))
        }
    })
}
