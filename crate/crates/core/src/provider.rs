//! Transport plumbing shared by the embedding and chat clients: JSON over
//! HTTP, retry with exponential backoff, and an in-flight request cap.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("cannot parse provider response: {0}")]
    Parse(String),
    #[error("provider misconfigured: {0}")]
    Config(String),
}

impl ProviderError {
    /// Transport failures, rate limiting and server-side errors are worth
    /// another attempt; malformed responses and client errors are not.
    pub fn is_retriable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            ProviderError::Parse(_) | ProviderError::Config(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (1-based): base * 2^(retry-1).
    pub fn delay_before(&self, retry: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX))
    }

    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_retriable() && attempt < attempts => {
                    std::thread::sleep(self.delay_before(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
pub struct InFlightLimit {
    available: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        InFlightLimit {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self.freed.wait(available).unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        InFlightPermit { limit: self }
    }
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut available = self
            .limit
            .available
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.limit.freed.notify_one();
    }
}

/// Blocking JSON POST. Non-2xx responses surface as [`ProviderError::Http`].
#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl JsonEndpoint {
    pub fn new(url: &str, timeout: Duration, api_key: Option<String>) -> Result<Self, ProviderError> {
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(ProviderError::Config(format!(
                "endpoint must be an http(s) URL, got {url:?}"
            )));
        }
        if timeout.is_zero() {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Ok(JsonEndpoint {
            url: url.to_string(),
            api_key,
            agent,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn post<B: Serialize>(&self, body: &B) -> Result<Value, ProviderError> {
        let mut request = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body) {
            Ok(response) => response
                .into_json::<Value>()
                .map_err(|e| ProviderError::Parse(e.to_string())),
            Err(ureq::Error::Status(status, response)) => Err(ProviderError::Http {
                status,
                body: response.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(transport)) => {
                Err(ProviderError::Transport(transport.to_string()))
            }
        }
    }
}

/// Reads a credential from the named environment variable, if any.
pub fn credential_from_env(var: Option<&str>) -> Result<Option<String>, ProviderError> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| ProviderError::Config(format!("environment variable {name} is not set"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn retries_transport_errors_up_to_limit() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::no_delay(3).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Transport("reset".into()))
        });
        assert!(result.is_err());
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn parse_errors_are_not_retried() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::no_delay(3).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Parse("bad".into()))
        });
        assert_eq!(result, Err(ProviderError::Parse("bad".into())));
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn succeeds_after_transient_failure() {
        let calls = Cell::new(0);
        let result = RetryPolicy::no_delay(3).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(ProviderError::Http {
                    status: 503,
                    body: String::new(),
                })
            } else {
                Ok(7)
            }
        });
        assert_eq!(result, Ok(7));
    }

    #[test]
    fn backoff_doubles() {
        let policy = RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        };
        assert_eq!(policy.delay_before(1), Duration::from_millis(100));
        assert_eq!(policy.delay_before(2), Duration::from_millis(200));
        assert_eq!(policy.delay_before(3), Duration::from_millis(400));
    }

    #[test]
    fn client_errors_are_final() {
        assert!(!ProviderError::Http {
            status: 400,
            body: String::new()
        }
        .is_retriable());
        assert!(ProviderError::Http {
            status: 429,
            body: String::new()
        }
        .is_retriable());
    }

    #[test]
    fn endpoint_rejects_bad_config() {
        assert!(JsonEndpoint::new("ftp://x", Duration::from_secs(1), None).is_err());
        assert!(JsonEndpoint::new("http://x", Duration::ZERO, None).is_err());
    }

    #[test]
    fn in_flight_limit_bounds_concurrency() {
        let limit = Arc::new(InFlightLimit::new(2));
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let (limit, current, peak) = (limit.clone(), current.clone(), peak.clone());
                scope.spawn(move || {
                    let _permit = limit.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
