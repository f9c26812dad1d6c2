//! HTTP backend speaking the logprob-capable completions protocol.
//!
//! Scoring sends `prefix + continuation` with `echo: true, max_tokens: 0,
//! logprobs: 0` and averages the log-probabilities of the tokens whose text
//! offset lies inside the continuation. Generation is a plain greedy
//! completion request.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Capabilities, GenerationParams, LlmBackend, TokenCounter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_input_tokens: usize,
    /// Characters per token used for local budget checks.
    pub chars_per_token: f64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/completions".into(),
            model: String::new(),
            api_key_env: None,
            max_input_tokens: 8192,
            chars_per_token: 4.0,
            timeout_secs: 120,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Protocol(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| BackendError::Protocol(format!("invalid response body: {e}")))
    }
}

#[derive(Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

/// Mean-ready log-probabilities of the continuation tokens in an echo response.
fn continuation_from_echo(response: &Value, prefix_chars: usize) -> Result<Vec<f64>, BackendError> {
    let lp = response
        .pointer("/choices/0/logprobs")
        .cloned()
        .ok_or_else(|| BackendError::Protocol("response has no choices[0].logprobs".into()))?;
    let lp: Logprobs =
        serde_json::from_value(lp).map_err(|e| BackendError::Protocol(format!("bad logprobs: {e}")))?;
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::Protocol("logprob arrays differ in length".into()));
    }
    let mut picked: Vec<f64> = lp
        .text_offset
        .iter()
        .zip(&lp.token_logprobs)
        .filter(|(&off, _)| off >= prefix_chars)
        .filter_map(|(_, l)| *l)
        .collect();
    if picked.is_empty() {
        // The first continuation token may straddle the boundary.
        picked = lp
            .text_offset
            .iter()
            .zip(&lp.tokens)
            .zip(&lp.token_logprobs)
            .filter(|((&off, tok), _)| off + tok.chars().count() > prefix_chars)
            .filter_map(|(_, l)| *l)
            .collect();
    }
    Ok(picked)
}

impl TokenCounter for RemoteBackend {
    fn count_tokens(&self, text: &str) -> usize {
        (text.chars().count() as f64 / self.config.chars_per_token).ceil() as usize
    }
}

impl LlmBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scoring: true,
            generation: true,
        }
    }

    fn max_input_tokens(&self) -> usize {
        self.config.max_input_tokens
    }

    fn tokenization(&self) -> String {
        format!(
            "server-side tokenizer of {}; local budgets assume {} chars/token",
            self.config.model, self.config.chars_per_token
        )
    }

    fn continuation_logprobs(&self, prefix: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prefix}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let resp = self.post(&body)?;
        continuation_from_echo(&resp, prefix.chars().count())
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
        });
        let resp = self.post(&body)?;
        resp.pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("response has no choices[0].text".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_continuation_tokens_by_offset() {
        let resp = json!({"choices": [{"logprobs": {
            "tokens": ["Out", "put", ":", " person", ":", " John"],
            "token_logprobs": [null, -0.5, -0.1, -1.0, -0.2, -0.3],
            "text_offset": [0, 3, 6, 7, 14, 15]
        }}]});
        let lp = continuation_from_echo(&resp, 7).unwrap();
        assert_eq!(lp, vec![-1.0, -0.2, -0.3]);
    }

    #[test]
    fn straddling_token_is_used_when_nothing_else() {
        let resp = json!({"choices": [{"logprobs": {
            "tokens": ["ab", "cd"],
            "token_logprobs": [-0.1, -0.7],
            "text_offset": [0, 2]
        }}]});
        assert_eq!(continuation_from_echo(&resp, 3).unwrap(), vec![-0.7]);
    }

    #[test]
    fn malformed_logprobs_are_protocol_errors() {
        let resp = json!({"choices": [{"text": "x"}]});
        assert!(matches!(continuation_from_echo(&resp, 0), Err(BackendError::Protocol(_))));
    }
}
