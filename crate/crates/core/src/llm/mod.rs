//! Language-model access: conditional log-likelihood scoring and greedy
//! generation behind one trait, with retries and an on-disk score cache.

mod cache;
pub mod mock;
pub mod remote;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::ScoreCache;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend {backend} does not support {capability}")]
    Unsupported {
        backend: String,
        capability: &'static str,
    },
    #[error("empty continuation")]
    EmptyContinuation,
    #[error("prompt needs {needed} tokens, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unrecognized prompt: {0}")]
    Unrecognized(String),
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("score cache: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Whitespace token counting, used by the in-process backends.
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub scoring: bool,
    pub generation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_input_tokens: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_input_tokens: 1792,
            max_new_tokens: 256,
            temperature: 0.0,
        }
    }
}

pub trait LlmBackend: TokenCounter + Send + Sync {
    /// Model identity; part of every cache key.
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    /// Largest prompt (prefix plus continuation when scoring) accepted.
    fn max_input_tokens(&self) -> usize;

    /// How the backend tokenizes, recorded in run metadata.
    fn tokenization(&self) -> String;

    /// Natural-log probabilities of each continuation token given the prefix.
    fn continuation_logprobs(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError>;

    /// Greedy completion of `prompt`.
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Run `f`, retrying retryable failures with exponential backoff.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    log::warn!("{e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Mean per-token natural-log likelihood of `continuation` given `prefix`.
pub fn avg_loglik(backend: &dyn LlmBackend, prefix: &str, continuation: &str) -> Result<f64, BackendError> {
    avg_loglik_with(backend, prefix, continuation, &RetryPolicy::default())
}

fn avg_loglik_with(
    backend: &dyn LlmBackend,
    prefix: &str,
    continuation: &str,
    retry: &RetryPolicy,
) -> Result<f64, BackendError> {
    if !backend.capabilities().scoring {
        return Err(BackendError::Unsupported {
            backend: backend.name(),
            capability: "scoring",
        });
    }
    if continuation.trim().is_empty() {
        return Err(BackendError::EmptyContinuation);
    }
    let needed = backend.count_tokens(prefix) + backend.count_tokens(continuation);
    let budget = backend.max_input_tokens();
    if needed > budget {
        return Err(BackendError::BudgetExceeded { needed, budget });
    }
    let logprobs = retry.run(|| backend.continuation_logprobs(prefix, continuation))?;
    if logprobs.is_empty() {
        return Err(BackendError::EmptyContinuation);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    if !mean.is_finite() {
        return Err(BackendError::NonFinite(mean));
    }
    Ok(mean)
}

/// Greedy generation under `params`.
pub fn generate(backend: &dyn LlmBackend, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
    generate_with(backend, prompt, params, &RetryPolicy::default())
}

fn generate_with(
    backend: &dyn LlmBackend,
    prompt: &str,
    params: &GenerationParams,
    retry: &RetryPolicy,
) -> Result<String, BackendError> {
    if !backend.capabilities().generation {
        return Err(BackendError::Unsupported {
            backend: backend.name(),
            capability: "generation",
        });
    }
    if params.temperature < 0.0 || !params.temperature.is_finite() {
        return Err(BackendError::Protocol(format!("invalid temperature {}", params.temperature)));
    }
    let needed = backend.count_tokens(prompt);
    let budget = params.max_input_tokens.min(backend.max_input_tokens());
    if needed > budget {
        return Err(BackendError::BudgetExceeded { needed, budget });
    }
    retry.run(|| backend.complete(prompt, params))
}

/// Shared handle on a backend with retry policy and optional score cache.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    retry: RetryPolicy,
    cache: Option<Arc<ScoreCache>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            cache: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: Arc<ScoreCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend(&self) -> &dyn LlmBackend {
        self.backend.as_ref()
    }

    pub fn avg_loglik(&self, prefix: &str, continuation: &str) -> Result<f64, BackendError> {
        let key = self
            .cache
            .as_ref()
            .map(|_| ScoreCache::key(&self.backend.name(), prefix, continuation));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(score) = cache.get(key) {
                return Ok(score);
            }
        }
        let score = avg_loglik_with(self.backend.as_ref(), prefix, continuation, &self.retry)?;
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            cache.put(key, score)?;
        }
        Ok(score)
    }

    pub fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        generate_with(self.backend.as_ref(), prompt, params, &self.retry)
    }
}

#[cfg(test)]
mod tests {
    use super::mock::*;
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn uniform_unigram_four_words() {
        let b = UniformBackend::new(4);
        let v = avg_loglik(&b, "any prefix", "a b c").unwrap();
        assert!((v - (-1.3863)).abs() < 1e-4);
        assert!((v - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_backend_scores_zero() {
        let b = UniformBackend::new(1);
        assert_eq!(avg_loglik(&b, "p", "x y").unwrap(), 0.0);
    }

    #[test]
    fn empty_continuation_rejected() {
        let b = UniformBackend::new(4);
        assert_eq!(avg_loglik(&b, "p", "  ").unwrap_err().to_string(), "empty continuation");
    }

    #[test]
    fn scoring_budget_enforced() {
        let b = UniformBackend::new(4).with_max_input_tokens(3);
        assert_eq!(
            avg_loglik(&b, "a b", "c d").unwrap_err(),
            BackendError::BudgetExceeded { needed: 4, budget: 3 }
        );
    }

    #[test]
    fn echo_backend_returns_canned_text() {
        let b = EchoBackend::new("None").with_completion("prompt A", "person: John");
        let p = GenerationParams::default();
        assert_eq!(generate(&b, "prompt A", &p).unwrap(), "person: John");
        assert_eq!(generate(&b, "other", &p).unwrap(), "None");
        assert_eq!(generate(&b, "prompt A", &p).unwrap(), generate(&b, "prompt A", &p).unwrap());
    }

    #[test]
    fn generation_budget_names_counts() {
        let b = EchoBackend::new("None");
        let p = GenerationParams {
            max_input_tokens: 2,
            ..Default::default()
        };
        let err = generate(&b, "one two three", &p).unwrap_err();
        assert_eq!(err, BackendError::BudgetExceeded { needed: 3, budget: 2 });
        assert!(err.to_string().contains('3') && err.to_string().contains('2'));
    }

    #[test]
    fn generation_capability_checked() {
        let b = UniformBackend::new(4);
        assert!(matches!(
            generate(&b, "x", &GenerationParams::default()),
            Err(BackendError::Unsupported { .. })
        ));
        let e = EchoBackend::new("x");
        assert!(matches!(avg_loglik(&e, "x", "y"), Err(BackendError::Unsupported { .. })));
    }

    #[test]
    fn bigram_is_order_sensitive() {
        let b = BigramBackend::new(64);
        let ab = avg_loglik(&b, "the cat sat on", "the mat today").unwrap();
        let ba = avg_loglik(&b, "the mat today", "the cat sat on").unwrap();
        assert!(ab <= 0.0 && ba <= 0.0);
        assert_ne!(ab, ba);
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl TokenCounter for Flaky {
        fn count_tokens(&self, text: &str) -> usize {
            WhitespaceCounter.count_tokens(text)
        }
    }

    impl LlmBackend for Flaky {
        fn name(&self) -> String {
            "flaky".into()
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                scoring: true,
                generation: true,
            }
        }
        fn max_input_tokens(&self) -> usize {
            100
        }
        fn tokenization(&self) -> String {
            "whitespace".into()
        }
        fn continuation_logprobs(&self, _: &str, _: &str) -> Result<Vec<f64>, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transport("connection reset".into()))
            } else {
                Ok(vec![-1.0, -3.0])
            }
        }
        fn complete(&self, _: &str, _: &GenerationParams) -> Result<String, BackendError> {
            Err(BackendError::Transport("down".into()))
        }
    }

    fn quick() -> RetryPolicy {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn transport_errors_are_retried() {
        let b = Arc::new(Flaky {
            failures: 3,
            calls: AtomicU32::new(0),
        });
        let g = Gateway::new(b.clone()).with_retry(quick());
        assert_eq!(g.avg_loglik("p", "c").unwrap(), -2.0);
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn retries_are_bounded() {
        let b = Arc::new(Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
        });
        let g = Gateway::new(b.clone()).with_retry(quick());
        assert!(matches!(g.avg_loglik("p", "c"), Err(BackendError::Transport(_))));
        assert_eq!(b.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn cache_short_circuits_backend() {
        let dir = tempfile::tempdir().unwrap();
        let b = Arc::new(Flaky {
            failures: 0,
            calls: AtomicU32::new(0),
        });
        let cache = Arc::new(ScoreCache::open(dir.path()).unwrap());
        let g = Gateway::new(b.clone()).with_cache(cache);
        assert_eq!(g.avg_loglik("p", "c").unwrap(), -2.0);
        assert_eq!(g.avg_loglik("p", "c").unwrap(), -2.0);
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);

        // A fresh process reads the persisted entries back.
        let reopened = Arc::new(ScoreCache::open(dir.path()).unwrap());
        let g2 = Gateway::new(b.clone()).with_cache(reopened);
        assert_eq!(g2.avg_loglik("p", "c").unwrap(), -2.0);
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }
}
