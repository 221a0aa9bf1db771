//! Remote backends speaking the common chat-completions and embeddings JSON
//! protocols.
//!
//! Chat request body:
//!
//! ```text
//! {"model": "...", "messages": [{"role": "user", "content": "<prompt>"}],
//!  "temperature": 0.0, "max_tokens": 512, "seed": 7}
//! ```
//!
//! The reply text is read from `choices[0].message.content`. Embedding
//! requests send `{"model": "...", "input": ["tok", ...]}` and read
//! `data[i].embedding`, ordered by `data[i].index`.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::retry::{ConcurrencyLimiter, RetryPolicy};
use super::{BackendError, CallContext, Completion, EmbeddingBackend, TextBackend};
use crate::prompts::PromptText;
use crate::types::GenParams;

/// Outcome of a failed request.
#[derive(Debug, Clone, PartialEq)]
pub enum TransportFailure {
    /// Worth retrying: connection problems, timeouts, HTTP 429 and 5xx.
    Transient(String),
    Permanent(BackendError),
}

/// Posts a JSON body and returns the decoded JSON reply.
pub trait JsonTransport: Send + Sync {
    fn post_json(&self, body: &Value) -> Result<Value, TransportFailure>;
}

/// Blocking HTTP transport with bearer-token auth.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        Ok(Self {
            client,
            url: url.into(),
            api_key,
        })
    }
}

impl JsonTransport for HttpTransport {
    fn post_json(&self, body: &Value) -> Result<Value, TransportFailure> {
        let mut request = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| TransportFailure::Transient(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| TransportFailure::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportFailure::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(TransportFailure::Permanent(BackendError::Status {
                status: status.as_u16(),
                body: text,
            }));
        }
        serde_json::from_str(&text).map_err(|e| TransportFailure::Permanent(BackendError::Malformed(e.to_string())))
    }
}

type Sleeper = fn(Duration);

struct Caller {
    transport: Box<dyn JsonTransport>,
    retry: RetryPolicy,
    limiter: Option<Arc<ConcurrencyLimiter>>,
    sleep: Sleeper,
}

impl Caller {
    fn call(&self, body: &Value) -> Result<(Value, u32), BackendError> {
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.limiter.as_deref().map(ConcurrencyLimiter::acquire);
                self.transport.post_json(body)
            };
            match result {
                Ok(value) => return Ok((value, attempt)),
                Err(TransportFailure::Permanent(e)) => return Err(e),
                Err(TransportFailure::Transient(message)) => {
                    if attempt >= max_attempts {
                        return Err(BackendError::Transport {
                            message,
                            attempts: attempt,
                        });
                    }
                    tracing::warn!(attempt, %message, "transient backend failure, backing off");
                    (self.sleep)(self.retry.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Chat-completions client. The whole rendered prompt goes into a single
/// user message.
pub struct RemoteChat {
    id: String,
    model: String,
    max_input_tokens: Option<usize>,
    caller: Caller,
}

impl RemoteChat {
    pub fn new(id: impl Into<String>, model: impl Into<String>, transport: Box<dyn JsonTransport>) -> Self {
        Self {
            id: id.into(),
            model: model.into(),
            max_input_tokens: None,
            caller: Caller {
                transport,
                retry: RetryPolicy::default(),
                limiter: None,
                sleep: std::thread::sleep,
            },
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.caller.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<ConcurrencyLimiter>) -> Self {
        self.caller.limiter = Some(limiter);
        self
    }

    pub fn with_max_input_tokens(mut self, limit: Option<usize>) -> Self {
        self.max_input_tokens = limit;
        self
    }

    /// Replaces the backoff sleep; tests pass a no-op.
    pub fn with_sleeper(mut self, sleep: fn(Duration)) -> Self {
        self.caller.sleep = sleep;
        self
    }

    pub fn request_for(&self, prompt: &PromptText, params: &GenParams) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.text.clone(),
            }],
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
            seed: params.seed,
        }
    }
}

impl TextBackend for RemoteChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_input_tokens(&self) -> Option<usize> {
        self.max_input_tokens
    }

    fn complete(
        &self,
        prompt: &PromptText,
        params: &GenParams,
        ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        let body = serde_json::to_value(self.request_for(prompt, params))
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        tracing::debug!(backend = %self.id, mcq = ctx.mcq_id, iteration = ctx.iteration, "chat request");
        let (reply, attempts) = self.caller.call(&body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
        Ok(Completion {
            text: text.to_string(),
            attempts,
        })
    }
}

/// Embeddings-endpoint client; each token is sent as one input string.
pub struct RemoteEmbedding {
    id: String,
    model: String,
    caller: Caller,
}

impl RemoteEmbedding {
    pub fn new(id: impl Into<String>, model: impl Into<String>, transport: Box<dyn JsonTransport>) -> Self {
        Self {
            id: id.into(),
            model: model.into(),
            caller: Caller {
                transport,
                retry: RetryPolicy::default(),
                limiter: None,
                sleep: std::thread::sleep,
            },
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.caller.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<ConcurrencyLimiter>) -> Self {
        self.caller.limiter = Some(limiter);
        self
    }

    pub fn with_sleeper(mut self, sleep: fn(Duration)) -> Self {
        self.caller.sleep = sleep;
        self
    }
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingDatum>,
}

impl EmbeddingBackend for RemoteEmbedding {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = serde_json::json!({ "model": self.model, "input": tokens });
        let (reply, _) = self.caller.call(&body)?;
        let mut reply: EmbeddingReply =
            serde_json::from_value(reply).map_err(|e| BackendError::Malformed(e.to_string()))?;
        reply.data.sort_by_key(|d| d.index);
        Ok(reply.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    use super::*;
    use crate::backends::generate_text;
    use crate::prompts::render_generation_initial;
    use crate::types::Mcq;

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        bodies: Mutex<Vec<Value>>,
    }

    impl Flaky {
        fn new(failures: u32) -> Self {
            Self {
                failures,
                calls: AtomicU32::new(0),
                bodies: Mutex::new(Vec::new()),
            }
        }
    }

    impl JsonTransport for Arc<Flaky> {
        fn post_json(&self, body: &Value) -> Result<Value, TransportFailure> {
            self.bodies.lock().unwrap().push(body.clone());
            let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.failures {
                return Err(TransportFailure::Transient(format!("HTTP 503 #{n}")));
            }
            Ok(serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "Because."}}]}))
        }
    }

    fn no_sleep(_: Duration) {}

    fn policy(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            backoff_base_ms: 1,
            max_backoff_ms: 1,
        }
    }

    fn prompt() -> PromptText {
        render_generation_initial(&Mcq::new("q1", "Stem?", "Yes", vec!["No".into()]).unwrap())
    }

    #[test]
    fn recovers_after_transient_failures() {
        let transport = Arc::new(Flaky::new(2));
        let chat = RemoteChat::new("gpt", "gpt-4", Box::new(Arc::clone(&transport)))
            .with_retry(policy(3))
            .with_sleeper(no_sleep);
        let out = generate_text(&chat, &prompt(), &GenParams::default(), &CallContext::new("q1", 1)).unwrap();
        assert_eq!(out.text, "Because.");
        assert_eq!(out.attempts, 3);
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_at_max_attempts() {
        let transport = Arc::new(Flaky::new(10));
        let chat = RemoteChat::new("gpt", "gpt-4", Box::new(Arc::clone(&transport)))
            .with_retry(policy(3))
            .with_sleeper(no_sleep);
        let err = chat
            .complete(&prompt(), &GenParams::default(), &CallContext::new("q1", 1))
            .unwrap_err();
        assert_eq!(
            err,
            BackendError::Transport {
                message: "HTTP 503 #3".into(),
                attempts: 3
            }
        );
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn prompt_goes_into_one_user_message() {
        let transport = Arc::new(Flaky::new(0));
        let chat = RemoteChat::new("gpt", "gpt-4", Box::new(Arc::clone(&transport)));
        let params = GenParams {
            temperature: 0.0,
            max_output_tokens: 64,
            seed: Some(9),
        };
        chat.complete(&prompt(), &params, &CallContext::new("q1", 1)).unwrap();
        let body = transport.bodies.lock().unwrap()[0].clone();
        assert_eq!(body["model"], "gpt-4");
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], prompt().text);
        assert_eq!(body["max_tokens"], 64);
        assert_eq!(body["seed"], 9);
    }
}
