//! Text embeddings: unit-norm vectors, cosine similarity, a pluggable
//! provider interface with on-disk caching, and a deterministic offline
//! hashing embedder.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cache::{content_key, ContentCache};
use crate::provider::{credential_from_env, InFlightLimit, JsonEndpoint, ProviderError, RetryPolicy};

pub const DEFAULT_EMBEDDING_MODEL: &str = "sentence-transformers/all-mpnet-base-v2";
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text contains no tokens")]
    NoTokens,
    #[error("degenerate embedding: zero norm")]
    Degenerate,
    #[error("embedding contains a non-finite component")]
    NonFinite,
    #[error("empty embedding vector")]
    Empty,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector is not unit-norm (norm {norm})")]
    NotUnitNorm { norm: f64 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl EmbeddingError {
    /// True for failures a later attempt might fix (transport, 5xx, 429).
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbeddingError::Provider(e) if e.is_retriable())
    }
}

/// A finite vector with Euclidean norm 1 (within [`UNIT_NORM_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Scales `raw` to unit length.
    pub fn normalize(raw: Vec<f64>) -> Result<Self, EmbeddingError> {
        if raw.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::Degenerate);
        }
        Ok(UnitVector(raw.into_iter().map(|v| v / norm).collect()))
    }

    /// Accepts an already-normalized vector after checking the norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm { norm });
        }
        Ok(UnitVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for UnitVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        UnitVector::from_unit(values).map_err(serde::de::Error::custom)
    }
}

/// Dot product of two unit vectors.
pub fn cosine(u: &UnitVector, v: &UnitVector) -> Result<f64, EmbeddingError> {
    if u.dim() != v.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    Ok(dot(u.as_slice(), v.as_slice()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    /// Raw, possibly unnormalized vector for `text`.
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

pub const HASHING_DIM: usize = 256;
pub const HASHING_MODEL_ID: &str = "offline/fnv1a-token-hash-256";

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn hashing_bin(token: &str) -> usize {
    (fnv1a(token.as_bytes()) % HASHING_DIM as u64) as usize
}

/// Bag-of-tokens histogram over 256 FNV-1a bins, unnormalized.
pub fn token_histogram(text: &str) -> Vec<f64> {
    let mut bins = vec![0.0; HASHING_DIM];
    for token in tokens(text) {
        bins[hashing_bin(&token)] += 1.0;
    }
    bins
}

/// Deterministic offline embedder. Pure function of the text.
pub fn test_embedder(text: &str) -> Result<UnitVector, EmbeddingError> {
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let bins = token_histogram(text);
    if bins.iter().all(|&b| b == 0.0) {
        return Err(EmbeddingError::NoTokens);
    }
    UnitVector::normalize(bins)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

impl EmbeddingProvider for HashingEmbedder {
    fn model_id(&self) -> &str {
        HASHING_MODEL_ID
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let bins = token_histogram(text);
        if bins.iter().all(|&b| b == 0.0) {
            return Err(ProviderError::Parse("text contains no tokens".into()));
        }
        Ok(bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub endpoint: String,
    #[serde(default = "default_embedding_model")]
    pub model_id: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_embedding_model() -> String {
    DEFAULT_EMBEDDING_MODEL.to_string()
}

fn default_timeout_secs() -> u64 {
    60
}

/// Embeddings over HTTP: POST `{"model", "input": [text]}`.
///
/// Accepted response shapes: `{"data": [{"embedding": [...]}]}`,
/// `{"embedding": [...]}`, `{"embeddings": [[...]]}`, `[[...]]` or `[...]`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    endpoint: JsonEndpoint,
    model_id: String,
}

impl HttpEmbeddingProvider {
    pub fn new(config: &EmbeddingProviderConfig) -> Result<Self, ProviderError> {
        let api_key = credential_from_env(config.api_key_env.as_deref())?;
        let endpoint = JsonEndpoint::new(
            &config.endpoint,
            Duration::from_secs(config.timeout_secs),
            api_key,
        )?;
        Ok(HttpEmbeddingProvider {
            endpoint,
            model_id: config.model_id.clone(),
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let response = self.endpoint.post(&json!({
            "model": self.model_id,
            "input": [text],
        }))?;
        extract_embedding(&response)
    }
}

/// Pulls the first embedding out of any of the accepted response shapes.
pub fn extract_embedding(response: &Value) -> Result<Vec<f64>, ProviderError> {
    let candidate = match response {
        Value::Object(map) => {
            if let Some(data) = map.get("data") {
                data.get(0).and_then(|first| first.get("embedding"))
            } else if let Some(single) = map.get("embedding") {
                Some(single)
            } else {
                map.get("embeddings").and_then(|all| all.get(0))
            }
        }
        Value::Array(items) if items.first().is_some_and(Value::is_array) => items.first(),
        Value::Array(_) => Some(response),
        _ => None,
    };
    let array = candidate
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Parse("no embedding vector in response".into()))?;
    array
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| ProviderError::Parse(format!("non-numeric component {v}")))
        })
        .collect()
}

/// Provider front-end: whitespace check, retries, content-addressed cache,
/// local re-normalization and an in-flight cap.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: Option<ContentCache>,
    memo: Mutex<HashMap<String, UnitVector>>,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("model_id", &self.provider.model_id())
            .field("cache", &self.cache.as_ref().map(|c| c.dir().to_path_buf()))
            .finish()
    }
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        Embedder {
            provider,
            cache: None,
            memo: Mutex::new(HashMap::new()),
            retry: RetryPolicy::default(),
            limit: InFlightLimit::new(4),
        }
    }

    pub fn offline() -> Self {
        Embedder::new(Box::new(HashingEmbedder))
    }

    pub fn with_cache(mut self, cache: ContentCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limit = InFlightLimit::new(limit);
        self
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn embed(&self, text: &str) -> Result<UnitVector, EmbeddingError> {
        if text.split_whitespace().next().is_none() {
            return Err(EmbeddingError::EmptyText);
        }
        let key = content_key(&[self.model_id().as_bytes(), text.as_bytes()]);
        if let Some(hit) = self
            .memo
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&key)
        {
            return Ok(hit.clone());
        }
        let raw = match &self.cache {
            Some(cache) => {
                let bytes = cache.get_or_try_insert(&key, || -> Result<_, EmbeddingError> {
                    let raw = self.fetch(text)?;
                    Ok(serde_json::to_vec(&raw).expect("f64 vectors serialize"))
                })?;
                serde_json::from_slice::<Vec<f64>>(&bytes).map_err(|e| {
                    EmbeddingError::Cache(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
                })?
            }
            None => self.fetch(text)?,
        };
        let vector = UnitVector::normalize(raw)?;
        self.memo
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, vector.clone());
        Ok(vector)
    }

    fn fetch(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let _permit = self.limit.acquire();
        Ok(self.retry.run(|| self.provider.embed_raw(text))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Fixed(Vec<f64>, Arc<AtomicUsize>);

    impl EmbeddingProvider for Fixed {
        fn model_id(&self) -> &str {
            "fixed"
        }
        fn embed_raw(&self, _text: &str) -> Result<Vec<f64>, ProviderError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0.clone())
        }
    }

    fn v(values: &[f64]) -> UnitVector {
        UnitVector::from_unit(values.to_vec()).unwrap()
    }

    #[test]
    fn provider_vector_is_renormalized() {
        let calls = Arc::new(AtomicUsize::new(0));
        let embedder = Embedder::new(Box::new(Fixed(vec![3.0, 4.0], calls)));
        let got = embedder.embed("anything").unwrap();
        assert_eq!(got.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let calls = Arc::new(AtomicUsize::new(0));
        let embedder = Embedder::new(Box::new(Fixed(vec![0.0, 0.0], calls)));
        let err = embedder.embed("anything").unwrap_err();
        assert!(matches!(err, EmbeddingError::Degenerate));
        assert_eq!(err.to_string(), "degenerate embedding: zero norm");
    }

    #[test]
    fn empty_text_rejected() {
        let embedder = Embedder::offline();
        assert!(matches!(embedder.embed(" \n\t"), Err(EmbeddingError::EmptyText)));
        assert!(matches!(test_embedder(""), Err(EmbeddingError::EmptyText)));
        assert!(matches!(test_embedder("-- !!"), Err(EmbeddingError::NoTokens)));
    }

    #[test]
    fn repeated_embed_is_cached_and_identical() {
        let calls = Arc::new(AtomicUsize::new(0));
        let dir = tempfile::tempdir().unwrap();
        let embedder = Embedder::new(Box::new(Fixed(vec![1.0, 2.0, 2.0], calls.clone())))
            .with_cache(ContentCache::new(dir.path()).unwrap());
        let a = embedder.embed("same text").unwrap();
        let b = embedder.embed("same text").unwrap();
        assert_eq!(a, b);
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        // a fresh embedder over the same cache dir never calls the provider
        let calls2 = Arc::new(AtomicUsize::new(0));
        let again = Embedder::new(Box::new(Fixed(vec![9.0, 9.0, 9.0], calls2.clone())))
            .with_cache(ContentCache::new(dir.path()).unwrap());
        assert_eq!(again.embed("same text").unwrap(), a);
        assert_eq!(calls2.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn cosine_examples() {
        let u = v(&[1.0, 0.0]);
        let w = v(&[0.0, 1.0]);
        let m = v(&[0.6, 0.8]);
        assert_eq!(cosine(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine(&u, &w).unwrap(), 0.0);
        assert!((cosine(&m, &u).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(
            cosine(&u, &v(&[1.0, 0.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn from_unit_checks_norm() {
        assert!(matches!(
            UnitVector::from_unit(vec![1.0, 1.0]),
            Err(EmbeddingError::NotUnitNorm { .. })
        ));
        assert!(UnitVector::from_unit(vec![f64::NAN]).is_err());
    }

    #[test]
    fn hashing_embedder_examples() {
        // "a", "b", "c" land in distinct bins (140, 165, 242)
        let bins: Vec<usize> = ["a", "b", "c"].iter().map(|t| hashing_bin(t)).collect();
        assert_eq!(bins, vec![140, 165, 242]);
        let ab = test_embedder("a b").unwrap();
        let ac = test_embedder("a c").unwrap();
        assert!((cosine(&ab, &ac).unwrap() - 0.5).abs() < 1e-12);

        let same1 = test_embedder("Path disclosure in /var/www").unwrap();
        let same2 = test_embedder("Path disclosure in /var/www").unwrap();
        assert_eq!(same1, same2);
        assert!((cosine(&same1, &same2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_disjoint_collision_free_texts_are_orthogonal() {
        let left = ["server", "banner", "version"];
        let right = ["email", "leak", "video"];
        let mut all: Vec<usize> = left.iter().chain(right.iter()).map(|t| hashing_bin(t)).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 6, "fixture tokens must not collide");
        let a = test_embedder(&left.join(" ")).unwrap();
        let b = test_embedder(&right.join(" ")).unwrap();
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        let got: Vec<String> = tokens("Full-Path DISCLOSURE: /etc/passwd").collect();
        assert_eq!(got, ["full", "path", "disclosure", "etc", "passwd"]);
    }

    #[test]
    fn extracts_known_response_shapes() {
        let shapes = [
            json!({"data": [{"embedding": [1.0, 2.0]}]}),
            json!({"embedding": [1.0, 2.0]}),
            json!({"embeddings": [[1.0, 2.0]]}),
            json!([[1.0, 2.0]]),
            json!([1.0, 2.0]),
        ];
        for shape in shapes {
            assert_eq!(extract_embedding(&shape).unwrap(), vec![1.0, 2.0]);
        }
        assert!(extract_embedding(&json!({"data": []})).is_err());
        assert!(extract_embedding(&json!({"embedding": ["x"]})).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_self_one(
            raw_a in proptest::collection::vec(-100.0f64..100.0, 8),
            raw_b in proptest::collection::vec(-100.0f64..100.0, 8),
        ) {
            prop_assume!(raw_a.iter().any(|x| x.abs() > 1e-3));
            prop_assume!(raw_b.iter().any(|x| x.abs() > 1e-3));
            let a = UnitVector::normalize(raw_a).unwrap();
            let b = UnitVector::normalize(raw_b).unwrap();
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            let c = cosine(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
        }

        #[test]
        fn hashing_embedder_is_unit_norm(text in "[a-z ]{1,80}") {
            prop_assume!(text.chars().any(|c| c.is_alphanumeric()));
            let v = test_embedder(&text).unwrap();
            let norm = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
        }
    }
}
