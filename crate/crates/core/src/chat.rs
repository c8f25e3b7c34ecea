//! Chat-completion clients: the provider trait, an HTTP implementation, a
//! deterministic offline mock, and a caching/retrying front-end.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::{content_key, ContentCache};
use crate::provider::{credential_from_env, InFlightLimit, JsonEndpoint, ProviderError, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    #[serde(default)]
    pub temperature: f64,
    /// Independent classifications per report.
    #[serde(default = "one")]
    pub trials: u32,
}

fn one() -> u32 {
    1
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            trials: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatProviderConfig {
    pub endpoint: String,
    pub model_id: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_timeout_secs() -> u64 {
    120
}

/// POST `{"model", "messages": [{role, content}], "temperature"}`.
/// The reply may be `{"content": "..."}` or the chat-completions
/// `{"choices": [{"message": {"content": "..."}}]}` envelope.
#[derive(Debug, Clone)]
pub struct HttpChatProvider {
    endpoint: JsonEndpoint,
    model_id: String,
}

impl HttpChatProvider {
    pub fn new(config: &ChatProviderConfig) -> Result<Self, ProviderError> {
        let api_key = credential_from_env(config.api_key_env.as_deref())?;
        Ok(HttpChatProvider {
            endpoint: JsonEndpoint::new(
                &config.endpoint,
                Duration::from_secs(config.timeout_secs),
                api_key,
            )?,
            model_id: config.model_id.clone(),
        })
    }
}

impl ChatProvider for HttpChatProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        extract_content(&self.endpoint.post(request)?)
    }
}

pub fn extract_content(response: &Value) -> Result<String, ProviderError> {
    let content = response.get("content").or_else(|| {
        response
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
    });
    content
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Parse("response has no text content".into()))
}

pub const MOCK_MODEL_ID: &str = "offline/mock-taxonomy-rule";

/// Answers from the prompt text alone; see [`crate::triage::mock_chat`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockChat;

impl ChatProvider for MockChat {
    fn model_id(&self) -> &str {
        MOCK_MODEL_ID
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let prompt = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        Ok(crate::triage::mock_chat(&prompt))
    }
}

/// Retries, caches and rate-limits calls to a [`ChatProvider`].
pub struct ChatClient {
    provider: Box<dyn ChatProvider>,
    sampling: SamplingParams,
    retry: RetryPolicy,
    cache: Option<ContentCache>,
    limit: InFlightLimit,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("model_id", &self.provider.model_id())
            .field("sampling", &self.sampling)
            .finish()
    }
}

impl ChatClient {
    pub fn new(provider: Box<dyn ChatProvider>) -> Self {
        ChatClient {
            provider,
            sampling: SamplingParams::default(),
            retry: RetryPolicy::default(),
            cache: None,
            limit: InFlightLimit::new(4),
        }
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: ContentCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limit = InFlightLimit::new(limit);
        self
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn sampling(&self) -> SamplingParams {
        self.sampling
    }

    /// Sends `prompt` as a single user message.
    pub fn ask(&self, prompt: &str) -> Result<String, ProviderError> {
        self.ask_trial(prompt, 0)
    }

    /// Like [`ChatClient::ask`], but each trial number is cached
    /// separately so repeated trials reach the provider.
    pub fn ask_trial(&self, prompt: &str, trial: u32) -> Result<String, ProviderError> {
        let request = ChatRequest {
            model: self.model_id().to_string(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.sampling.temperature,
        };
        let Some(cache) = &self.cache else {
            return self.call(&request);
        };
        let temperature = serde_json::to_string(&self.sampling.temperature).expect("temperature serializes");
        let key = content_key(&[
            self.model_id().as_bytes(),
            prompt.as_bytes(),
            temperature.as_bytes(),
            trial.to_string().as_bytes(),
        ]);
        let bytes = cache
            .get_or_try_insert(&key, || -> Result<Vec<u8>, CacheFill> {
                Ok(self.call(&request)?.into_bytes())
            })
            .map_err(|e| match e {
                CacheFill::Provider(p) => p,
                CacheFill::Io(io) => ProviderError::Transport(format!("response cache: {io}")),
            })?;
        String::from_utf8(bytes).map_err(|e| ProviderError::Parse(format!("cached response: {e}")))
    }

    fn call(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let _permit = self.limit.acquire();
        self.retry.run(|| self.provider.complete(request))
    }
}

enum CacheFill {
    Provider(ProviderError),
    Io(std::io::Error),
}

impl From<std::io::Error> for CacheFill {
    fn from(e: std::io::Error) -> Self {
        CacheFill::Io(e)
    }
}

impl From<ProviderError> for CacheFill {
    fn from(e: ProviderError) -> Self {
        CacheFill::Provider(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Counting(Arc<AtomicUsize>);

    impl ChatProvider for Counting {
        fn model_id(&self) -> &str {
            "counting"
        }
        fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("{} #{n}", request.messages[0].content.len()))
        }
    }

    struct Flaky(Arc<AtomicUsize>);

    impl ChatProvider for Flaky {
        fn model_id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _request: &ChatRequest) -> Result<String, ProviderError> {
            if self.0.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(ProviderError::Transport("reset".into()))
            } else {
                Ok("1".into())
            }
        }
    }

    #[test]
    fn content_shapes() {
        assert_eq!(extract_content(&json!({"content": "1"})).unwrap(), "1");
        assert_eq!(
            extract_content(&json!({"choices": [{"message": {"role": "assistant", "content": "0"}}]}))
                .unwrap(),
            "0"
        );
        assert!(extract_content(&json!({"choices": []})).is_err());
    }

    #[test]
    fn cache_makes_repeat_calls_free() {
        let calls = Arc::new(AtomicUsize::new(0));
        let dir = tempfile::tempdir().unwrap();
        let client = ChatClient::new(Box::new(Counting(calls.clone())))
            .with_cache(ContentCache::new(dir.path()).unwrap());
        let a = client.ask("prompt").unwrap();
        let b = client.ask("prompt").unwrap();
        assert_eq!(a, b);
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        let hotter = ChatClient::new(Box::new(Counting(calls.clone())))
            .with_cache(ContentCache::new(dir.path()).unwrap())
            .with_sampling(SamplingParams {
                temperature: 0.7,
                trials: 1,
            });
        hotter.ask("prompt").unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2, "sampling params are part of the key");

        client.ask_trial("prompt", 1).unwrap();
        assert_eq!(client.ask_trial("prompt", 0).unwrap(), a);
        assert_eq!(calls.load(Ordering::SeqCst), 3, "each trial is cached on its own");
    }

    #[test]
    fn three_attempts_then_success() {
        let calls = Arc::new(AtomicUsize::new(0));
        let client =
            ChatClient::new(Box::new(Flaky(calls.clone()))).with_retry(RetryPolicy::no_delay(3));
        assert_eq!(client.ask("p").unwrap(), "1");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        struct Down;
        impl ChatProvider for Down {
            fn model_id(&self) -> &str {
                "down"
            }
            fn complete(&self, _: &ChatRequest) -> Result<String, ProviderError> {
                Err(ProviderError::Http {
                    status: 502,
                    body: "bad gateway".into(),
                })
            }
        }
        let client = ChatClient::new(Box::new(Down)).with_retry(RetryPolicy::no_delay(3));
        assert!(matches!(client.ask("p"), Err(ProviderError::Http { status: 502, .. })));
    }
}
